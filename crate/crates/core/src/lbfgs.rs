//! Limited-memory BFGS direction computation (two-loop recursion) on top of
//! a caller-supplied initial inverse Hessian.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)>,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores a step `s` and gradient change `y`; pairs violating the
    /// curvature condition are skipped. Returns whether the pair was kept.
    pub fn push(&mut self, s: DVector<f64>, y: DVector<f64>) -> bool {
        let sy = s.dot(&y);
        if !(sy > 1e-16 * s.norm() * y.norm()) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// `-H g`, where `H` is the implicit inverse Hessian built on top of
    /// the linear map `h0`.
    pub fn direction(
        &self,
        g: &DVector<f64>,
        h0: impl Fn(&DVector<f64>) -> DVector<f64>,
    ) -> DVector<f64> {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        let mut r = h0(&q);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&r);
            r.axpy(a - b, s, 1.0);
        }
        -r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn quadratic_converges_in_few_steps() {
        // f(x) = ½ xᵀAx − bᵀx with exact line search.
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut x = DVector::zeros(3);
        let mut mem = LbfgsMemory::new(5);
        let h0 = DVector::from_element(3, 1.0);
        let mut g = &a * &x - &b;
        for _ in 0..3 {
            let d = mem.direction(&g, |q| q.component_mul(&h0));
            let step = -g.dot(&d) / d.dot(&(&a * &d));
            let s = &d * step;
            x += &s;
            let g_new = &a * &x - &b;
            mem.push(s, &g_new - &g);
            g = g_new;
        }
        let exact = a.lu().solve(&b).unwrap();
        assert!((x - exact).norm() < 1e-10);
    }

    #[test]
    fn rejects_negative_curvature() {
        let mut mem = LbfgsMemory::new(2);
        let s = DVector::from_vec(vec![1.0, 0.0]);
        assert!(!mem.push(s.clone(), -s.clone()));
        assert!(mem.push(s.clone(), s.clone()));
        assert!(mem.push(s.clone(), s.clone()));
        assert!(mem.push(s.clone(), s));
        assert_eq!(mem.len(), 2);
    }
}
