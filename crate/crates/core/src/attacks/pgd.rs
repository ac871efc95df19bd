use crate::error::Result;
use crate::scalar::Scalar;

use super::{project_into, signed_step, BestTracker, ExampleObjective, ExampleOutcome};

pub(super) fn run_example<T: Scalar>(objective: &ExampleObjective<'_, T>, x: &[T], start: Vec<T>, eps: T, alpha: T, steps: usize, stop_on_success: bool) -> Result<ExampleOutcome<T>> {
    let mut cur = start;
    let mut eval = objective.evaluate(&cur, steps > 0)?;
    let mut best = BestTracker::new(&cur, &eval);
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(best.best_value);
    if stop_on_success && best.succeeded() {
        return Ok(best.finish(trace, steps + 1));
    }
    for t in 0..steps {
        let grad = eval.grad.take().expect("gradient requested");
        let mut next = signed_step(&cur, &grad, alpha);
        project_into(&mut next, x, eps);
        cur = next;
        eval = objective.evaluate(&cur, t + 1 < steps)?;
        best.update(&cur, &eval);
        trace.push(best.best_value);
        if stop_on_success && best.succeeded() {
            break;
        }
    }
    Ok(best.finish(trace, steps + 1))
}
