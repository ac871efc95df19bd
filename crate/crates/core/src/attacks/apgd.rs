use crate::error::Result;
use crate::scalar::Scalar;

use super::{project_into, signed_step, BestTracker, ExampleObjective, ExampleOutcome};

const MOMENTUM: f64 = 0.75;
const OSCILLATION_RHO: f64 = 0.75;

/// Checkpoint spacing starts at `0.22 N` and shrinks by `0.03 N` per
/// checkpoint down to `0.06 N`.
struct Schedule {
    window: usize,
    shrink: usize,
    min_window: usize,
}

impl Schedule {
    fn new(steps: usize) -> Self {
        let frac = |p: f64| ((p * steps as f64) as usize).max(1);
        Self {
            window: frac(0.22),
            shrink: frac(0.03),
            min_window: frac(0.06),
        }
    }

    fn advance(&mut self) {
        self.window = self.window.saturating_sub(self.shrink).max(self.min_window);
    }
}

pub(super) fn run_example<T: Scalar>(objective: &ExampleObjective<'_, T>, x: &[T], start: Vec<T>, eps: T, steps: usize, stop_on_success: bool) -> Result<ExampleOutcome<T>> {
    let momentum = T::lit(MOMENTUM);
    let mut step = eps + eps;
    let mut cur = start;
    let mut prev = cur.clone();
    let first = objective.evaluate(&cur, true)?;
    let mut grad = first.grad.clone().expect("gradient requested");
    let mut best = BestTracker::new(&cur, &first);
    // objective value at every iterate, starting point included
    let mut history = vec![first.value];
    let mut trace = vec![best.best_value];

    let mut schedule = Schedule::new(steps);
    let mut since_check = 0;
    let mut best_at_check = best.best_value;
    let mut reduced_at_check = false;

    for i in 0..steps {
        if stop_on_success && best.succeeded() {
            break;
        }
        let mut z = signed_step(&cur, &grad, step);
        project_into(&mut z, x, eps);
        let next = if i == 0 {
            z
        } else {
            let mut n: Vec<T> = cur
                .iter()
                .zip(&z)
                .zip(&prev)
                .map(|((c, z), p)| *c + momentum * (*z - *c) + (T::one() - momentum) * (*c - *p))
                .collect();
            project_into(&mut n, x, eps);
            n
        };
        prev = std::mem::replace(&mut cur, next);
        let need_grad = i + 1 < steps;
        let eval = objective.evaluate(&cur, need_grad)?;
        history.push(eval.value);
        best.update(&cur, &eval);
        trace.push(best.best_value);
        if let Some(g) = eval.grad {
            grad = g;
        }

        since_check += 1;
        if since_check == schedule.window && need_grad {
            let k = schedule.window;
            let increases = history[history.len() - k..]
                .iter()
                .zip(&history[history.len() - k - 1..])
                .filter(|(now, before)| now > before)
                .count();
            let oscillating = (increases as f64) <= OSCILLATION_RHO * k as f64;
            let stalled = !reduced_at_check && best.best_value <= best_at_check;
            let reduce = oscillating || stalled;
            reduced_at_check = reduce;
            best_at_check = best.best_value;
            if reduce {
                step = step / T::lit(2.0);
                cur.clone_from(&best.best_x);
                prev.clone_from(&best.best_x);
                grad.clone_from(&best.best_grad);
            }
            schedule.advance();
            since_check = 0;
        }
    }
    Ok(best.finish(trace, steps + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shrinks_to_floor() {
        let mut s = Schedule::new(100);
        assert_eq!((s.window, s.shrink, s.min_window), (22, 3, 6));
        let mut seen = vec![s.window];
        for _ in 0..8 {
            s.advance();
            seen.push(s.window);
        }
        assert_eq!(seen, [22, 19, 16, 13, 10, 7, 6, 6, 6]);
        let tiny = Schedule::new(1);
        assert_eq!((tiny.window, tiny.min_window), (1, 1));
    }
}
