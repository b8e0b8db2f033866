//! Oracles shared by the integration suites: finite differences and a
//! hand-rolled momentum update, deliberately written from scratch so the
//! library's own gradient and optimizer code is never on both sides of a
//! comparison.

/// Central finite differences with a per-coordinate step scaled to the
/// coordinate's magnitude.
pub fn central_fd(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error in the Euclidean norm, safe for near-zero vectors.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "vector length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Nesterov momentum written out longhand: `v <- mu v + g`, then the
/// parameter moves along `g + mu v`.
pub struct HandNesterov {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl HandNesterov {
    pub fn new(lr: f64, momentum: f64, dim: usize) -> Self {
        HandNesterov {
            lr,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.lr * (g + self.momentum * *v);
        }
    }
}
