//! Minimal reverse-mode differentiation over dense real arrays, plus the
//! Adam optimizer used for both network and variational parameters.

mod array;
mod graph;
mod params;

pub use array::Array;
pub use graph::{Gradients, Graph, Node, OpKind};
pub use params::{GradTable, ParamStore, StoreId, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Array<f64> {
        Array::vector(x.to_vec())
    }

    #[test]
    fn analytic_primitive_values() {
        let mut g = Graph::new();
        let z = g.constant(v(&[0.0]));
        let one = g.constant(v(&[1.0]));
        let sp = g.softplus(z).unwrap();
        let th = g.tanh(z).unwrap();
        let sw = g.swish(one).unwrap();
        assert!((g.scalar(sp) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.scalar(th), 0.0);
        assert!((g.scalar(sw) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn affine_identity() {
        let mut g = Graph::new();
        let x = g.constant(Array::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        let w = g.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(v(&[0.0, 0.0]));
        let y = g.primitive(OpKind::Affine, &[x, w, b]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn affine_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::zeros(&[2, 3]));
        let w = g.constant(Array::zeros(&[2, 2]));
        let b = g.constant(Array::zeros(&[2]));
        let err = g.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("affine") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn gaussian_nll_analytic() {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut g = Graph::new();
        let m = g.constant(v(&[0.0]));
        let lv = g.constant(v(&[0.0]));
        let a = g.gaussian_nll(&v(&[0.0]), m, lv).unwrap();
        let b = g.gaussian_nll(&v(&[1.0]), m, lv).unwrap();
        assert!((g.scalar(a) - half_ln_2pi).abs() < 1e-12);
        assert!((g.scalar(b) - (0.5 + half_ln_2pi)).abs() < 1e-12);
        assert!(g.gaussian_nll(&v(&[0.0, 1.0]), m, lv).is_err());
    }

    #[test]
    fn kl_analytic() {
        let mut g = Graph::new();
        let mq = g.constant(v(&[1.0]));
        let lq = g.constant(v(&[0.0]));
        let k = g.diag_gaussian_kl(mq, lq, &v(&[0.0]), &v(&[0.0])).unwrap();
        assert!((g.scalar(k) - 0.5).abs() < 1e-12);
        let z = g.constant(v(&[0.3, -0.2]));
        let lz = g.constant(v(&[0.1, 0.4]));
        let same = g.diag_gaussian_kl(z, lz, &v(&[0.3, -0.2]), &v(&[0.1, 0.4])).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn linear_backward() {
        let mut store = ParamStore::new();
        store.insert("w", v(&[0.5, -1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(v(&[3.0, 4.0, -5.0]));
        let wx = g.mul(w, x).unwrap();
        let root = g.sum(wx).unwrap();
        let grads = g.backward(root, &store).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.0, 4.0, -5.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut store = ParamStore::new();
        store.insert("used", v(&[1.0]));
        store.insert("unused", v(&[1.0, 2.0]));
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        let e = g.exp(u).unwrap();
        let root = g.sum(e).unwrap();
        let grads = g.backward(root, &store).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(v(&[1.0, 2.0]));
        assert!(g.backward_all(x).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(v(&[1000.0]));
        assert!(matches!(g.exp(x), Err(crate::Error::NonFinite { .. })));
    }

    #[test]
    fn f32_graph_works() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Array::vector(vec![2.0f32]));
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.square(w).unwrap();
        let root = g.sum(sq).unwrap();
        let grads = g.backward(root, &store).unwrap();
        assert_eq!(grads.get("w").unwrap().item(), 4.0f32);
    }
}
