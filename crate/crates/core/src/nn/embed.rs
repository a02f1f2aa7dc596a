use crate::error::{Error, Result};

/// Sinusoidal embedding of a diffusion step: `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]`
/// with `fᵢ = 10000^(−2i/dim)`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dimension {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_is_alternating_zero_one() {
        assert_eq!(time_embed(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(time_embed(3, 16).unwrap(), time_embed(3, 16).unwrap());
        let a = time_embed(1, 16).unwrap();
        let b = time_embed(2, 16).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // first pair alone: |(sin1,cos1) − (sin2,cos2)| = 2·sin(1/2)
        assert!(dist >= 2.0 * 0.5f64.sin() - 1e-12);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(time_embed(1, 5), Err(Error::Config(_))));
    }
}
