//! Dense tensors with reverse-mode differentiation, plus the optimizer,
//! normalization and checkpointing the GNN needs.

mod batchnorm;
mod checkpoint;
mod optim;
mod param;
mod tape;

pub use batchnorm::{BatchNormState, Mode, DEFAULT_MOMENTUM};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use optim::{clip_gradients, Adam, ClipMode};
pub use param::{glorot_uniform, ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};


#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::gradcheck::max_relative_error;
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(5, 4, &mut rng);
        let target = Arc::new(random(5, 3, &mut rng));
        let mut store = ParamStore::new();
        let w1 = store.add("w1", random(4, 4, &mut rng));
        let w2 = store.add("w2", random(4, 3, &mut rng));
        let b = store.add("b", random(1, 3, &mut rng));
        let (err, n) = max_relative_error(&mut store, 200, 2, |s| {
            let mut t = Tape::new();
            let xi = t.input(x.clone());
            let p1 = t.param(s, w1);
            let h = t.matmul(xi, p1).unwrap();
            let h = t.leaky_relu(h, 0.2);
            let p2 = t.param(s, w2);
            let y = t.matmul(h, p2).unwrap();
            let pb = t.param(s, b);
            let y = t.add_row(y, pb).unwrap();
            let l = t.mse(y, target.clone()).unwrap();
            (t, l)
        });
        assert_eq!(n, 31);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fused_edge_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let send: Arc<[usize]> = Arc::from(vec![0, 1, 2, 2, 0]);
        let recv: Arc<[usize]> = Arc::from(vec![1, 0, 1, 0, 2]);
        let target = Arc::new(random(3, 4, &mut rng));
        let mut store = ParamStore::new();
        let ps = store.add("ps", random(3, 4, &mut rng));
        let pr = store.add("pr", random(3, 4, &mut rng));
        let b = store.add("b", random(1, 4, &mut rng));
        let a = store.add("a", random(5, 1, &mut rng));
        let (err, _) = max_relative_error(&mut store, 200, 7, |s| {
            let mut t = Tape::new();
            let (vs, vr, vb, va) = (t.param(s, ps), t.param(s, pr), t.param(s, b), t.param(s, a));
            let h = t.edge_relu(vs, vr, vb, send.clone(), recv.clone()).unwrap();
            let out = t.weighted_scatter(h, va, recv.clone(), 3).unwrap();
            let l = t.mse(out, target.clone()).unwrap();
            (t, l)
        });
        assert!(err < 1e-4, "{err}");

        // agrees with the unfused composition
        let mut t = Tape::new();
        let (vs, vr, vb, va) = (t.param(&store, ps), t.param(&store, pr), t.param(&store, b), t.param(&store, a));
        let fused = t.edge_relu(vs, vr, vb, send.clone(), recv.clone()).unwrap();
        let fused = t.weighted_scatter(fused, va, recv.clone(), 3).unwrap();
        let x = t.gather_rows(vs, send.clone()).unwrap();
        let y = t.gather_rows(vr, recv.clone()).unwrap();
        let h = t.add(x, y).unwrap();
        let h = t.add_row(h, vb).unwrap();
        let h = t.relu(h);
        let h = t.mul_col(h, va).unwrap();
        let plain = t.scatter_add_rows(h, recv.clone(), 3).unwrap();
        assert!((t.value(fused) - t.value(plain)).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        // gather / scatter / softmax / concat / slice / centering composite
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let senders: Arc<[usize]> = Arc::from(vec![0, 1, 2, 3, 1, 0]);
        let receivers: Arc<[usize]> = Arc::from(vec![1, 2, 0, 0, 3, 2]);
        let target = Arc::new(random(4, 3, &mut rng));
        let mut store = ParamStore::new();
        let h = store.add("h", random(4, 3, &mut rng));
        let a = store.add("a", random(3, 1, &mut rng));
        let w = store.add("w", random(6, 3, &mut rng));
        let (err, _) = max_relative_error(&mut store, 200, 5, |s| {
            let mut t = Tape::new();
            let hv = t.param(s, h);
            let src = t.gather_rows(hv, senders.clone()).unwrap();
            let dst = t.gather_rows(hv, receivers.clone()).unwrap();
            let both = t.concat_cols(&[src, dst]).unwrap();
            let wv = t.param(s, w);
            let msg = t.matmul(both, wv).unwrap();
            let msg = t.relu(msg);
            let av = t.param(s, a);
            let score = t.matmul(msg, av).unwrap();
            let score = t.leaky_relu(score, 0.2);
            let head = t.slice_rows(score, 0, 3).unwrap();
            let tail = t.slice_rows(score, 3, 3).unwrap();
            let score = t.concat_rows(&[head, tail]).unwrap();
            let alpha = t.segment_softmax(score, receivers.clone()).unwrap();
            let weighted = t.mul_col(msg, alpha).unwrap();
            let agg = t.scatter_add_rows(weighted, receivers.clone(), 4).unwrap();
            let (centered, _) = t.center_rows(agg).unwrap();
            let l = t.mse(centered, target.clone()).unwrap();
            (t, l)
        });
        assert!(err < 1e-4, "{err}");
    }
}
