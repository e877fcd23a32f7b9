use rand::Rng;

use super::{Gradients, NeuralApproximator};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient vanishes are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(tensor name, coordinates checked, worst relative error)`.
    pub tensors: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.2).fold(0.0, f64::max)
    }
}

/// Compares `analytic` against central differences of `loss` on up to
/// `coords` random coordinates of every tensor.
pub fn finite_difference_check<F, R>(
    model: &NeuralApproximator,
    loss: F,
    analytic: &Gradients,
    coords: usize,
    step: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&NeuralApproximator) -> f64,
    R: Rng + ?Sized,
{
    let names: Vec<(String, usize)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, _, t)| (n, t.len()))
        .collect();
    let grads = analytic.tensors();
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (ti, (name, len)) in names.iter().enumerate() {
        let picks: Vec<usize> = if *len <= coords {
            (0..*len).collect()
        } else {
            (0..coords).map(|_| rng.gen_range(0..*len)).collect()
        };
        let mut worst: f64 = 0.0;
        for &c in &picks {
            let orig = model.params.tensors()[ti].2.as_slice().unwrap()[c];
            let set = |m: &mut NeuralApproximator, v: f64| {
                let mut all = m.params.tensors_mut();
                all[ti].2.as_slice_mut().unwrap()[c] = v;
            };
            set(&mut probe, orig + step);
            let up = loss(&probe);
            set(&mut probe, orig - step);
            let down = loss(&probe);
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * step);
            let exact = grads[ti].2.as_slice().unwrap()[c];
            let denom = exact.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
        }
        tensors.push((name.clone(), picks.len(), worst));
    }
    GradCheckReport { tensors }
}
