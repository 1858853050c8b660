//! Dense arrays, a recording graph with reverse-mode gradients, and Adam.

mod graph;
mod store;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, COSINE_EPS, KL_EPS};
pub use store::{clip_global_norm, AdamConfig, Binder, ParamStore, Track};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = g.constant(Tensor::eye(3));
        let bn = g.constant(b.clone());
        let out = g.matmul(i, bn).unwrap();
        assert_eq!(g.value(out), &b);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let r = g.constant(Tensor::matrix(3, 4, (0..12).map(|x| x as f64 * 0.3).collect()).unwrap());
        let out = g.matmul(z, r).unwrap();
        assert_eq!(g.value(out), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        for v in g.value(y).data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let c = 0.37;
        let x = g.constant(Tensor::vector(vec![c, c + 2f64.ln()]));
        let y = g.softmax_lastdim(x).unwrap();
        assert!(close(g.value(y).data()[0], 1.0 / 3.0, 1e-12));
        assert!(close(g.value(y).data()[1], 2.0 / 3.0, 1e-12));

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        assert!(g.value(y).is_finite());
        assert!(close(g.value(y).data()[0], 1.0, 1e-12));
        assert!(g.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![2.0, 0.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let c = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(2, 2, vec![0.3, 0.7, 0.5, 0.5]).unwrap());
        let l = g.kl_div(p, p).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let p = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let q = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let l = g.kl_div(p, q).unwrap();
        assert!(close(g.value(l).item(), 2f64.ln(), 1e-15));

        let eps = 1e-15;
        let p = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let q = g.constant(Tensor::vector(vec![1.0 - eps, eps]));
        let l = g.kl_div(p, q).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite() && v > 5.0);

        let bad = g.constant(Tensor::vector(vec![1.5, -0.5]));
        assert!(matches!(g.kl_div(bad, q), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::vector(vec![0.4, -1.2, 3.0]));
        let c = g.cosine_similarity(u, u).unwrap();
        assert!(close(g.value(c).item(), 1.0, 1e-15));

        let u = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let v = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let c = g.cosine_similarity(u, v).unwrap();
        assert_eq!(g.value(c).item(), 0.0);

        let w = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let c = g.cosine_similarity(w, u).unwrap();
        assert!(close(g.value(c).item(), 1.0 / 2f64.sqrt(), 1e-15));

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let c = g.cosine_similarity(z, z).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.input(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let s = g.sum(w);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.of(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.input(Tensor::vector(vec![3.0]));
        let z = g.constant(Tensor::vector(vec![0.0]));
        let l = g.mse(w, z).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.of(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn unreachable_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0])).unwrap();
        store.insert("b", Tensor::vector(vec![2.0])).unwrap();
        let mut g = Graph::new();
        let mut bind = Binder::new(&store, Track::All);
        let a = bind.get(&mut g, "a").unwrap();
        let _b = bind.get(&mut g, "b").unwrap();
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert!(grads.named().contains_key("a"));
        assert!(!grads.named().contains_key("b"));
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.5, -0.25])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.0, 0.0]));
        store.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.5, -0.25]);

        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0)).unwrap();
        store.insert("untouched", Tensor::scalar(7.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let cfg = AdamConfig::default();
        assert_eq!((cfg.lr, cfg.beta1, cfg.beta2), (1e-4, 0.9, 0.999));
        store.adam_step(&grads, &cfg).unwrap();
        let dw = 2.0 - store.get("w").unwrap().item();
        // m̂ = v̂ = 1 after one step, so the move is lr / (1 + eps)
        assert!(close(dw, 1e-4, 1e-11));
        assert_eq!(store.get("untouched").unwrap().item(), 7.0);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn adam_names_non_finite_parameter() {
        let mut store = ParamStore::new();
        store.insert("layer.w", Tensor::scalar(1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("layer.w".to_string(), Tensor::scalar(f64::NAN));
        let err = store.adam_step(&grads, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn frozen_binding_yields_constants() {
        let mut store = ParamStore::new();
        store.insert("pool.keys", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.insert("theta.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let mut bind = Binder::new(&store, Track::prefixes(&["pool."]));
        let k = bind.get(&mut g, "pool.keys").unwrap();
        let t = bind.get(&mut g, "theta.w").unwrap();
        assert!(g.requires_grad(k));
        assert!(!g.requires_grad(t));
        assert_eq!(bind.get(&mut g, "pool.keys").unwrap(), k);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::vector(vec![3.0, 4.0]));
        let n = clip_global_norm(&mut grads, 1.0);
        assert_eq!(n, 5.0);
        assert!(close(grads["a"].data()[0], 0.6, 1e-15));
    }
}
