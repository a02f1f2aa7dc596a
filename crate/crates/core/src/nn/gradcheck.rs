use super::Module;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter (and flat index inside it) with the largest error.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative errors below this magnitude floor are measured absolutely.
const ABS_FLOOR: f64 = 1e-6;

/// Checks every parameter of `model`.
///
/// `loss(model, true)` must return the loss and accumulate its analytic
/// gradient into the (already zeroed) gradient buffers; `loss(model, false)`
/// only evaluates the loss.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, step: f64, tolerance: f64) -> GradCheckReport
where
    M: Module,
    F: FnMut(&mut M, bool) -> f64,
{
    model.zero_grad();
    loss(model, true);
    let analytic = model.flat_grads();
    let names: Vec<(String, usize)> = model.params().iter().map(|p| (p.name.clone(), p.value.len())).collect();
    model.zero_grad();

    let base = model.flat_values();
    let mut values = base.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        tolerance,
    };
    let mut flat = 0;
    for (name, len) in names {
        for j in 0..len {
            let i = flat + j;
            values[i] = base[i] + step;
            model.set_flat_values(&values).expect("same layout");
            let plus = loss(model, false);
            values[i] = base[i] - step;
            model.set_flat_values(&values).expect("same layout");
            let minus = loss(model, false);
            values[i] = base[i];
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = format!("{name}[{j}]");
            }
            report.checked += 1;
        }
        flat += len;
    }
    model.set_flat_values(&base).expect("same layout");
    model.zero_grad();
    report
}
