mod common;

use common::{gradcheck_all, FD_REL_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unrest::grad::nn::{Transformer, TrunkConfig};
use unrest::grad::{Graph, ParamStore, Tensor};

#[test]
fn every_op_matches_central_differences() {
    let worst = gradcheck_all(100, 20);
    for (op, err) in &worst {
        assert!(*err < FD_REL_TOL, "{op}: relative error {err:e}");
    }
}

/// Parameter gradients through a full trunk, checked coordinate by coordinate.
#[test]
fn transformer_parameter_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = TrunkConfig {
        layers: 1,
        heads: 2,
        dim: 4,
        dropout: 0.0,
    };
    let trunk = Transformer::new(&mut store, "trunk", cfg, &mut rng).unwrap();
    let x = Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let valid = [true, true, false];
    let loss = |store: &ParamStore| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = trunk.forward(&mut g, store, xv, Some(&valid), None).unwrap();
        let t = g.tanh(y).unwrap();
        let l = g.sum(t).unwrap();
        (g, l)
    };
    let (g, l) = loss(&store);
    g.backward_into(l, &mut store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let h = common::FD_STEP;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for id in ids {
        let analytic = store.get(id).grad.clone().unwrap();
        for j in 0..analytic.numel() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let (g, l) = loss(&store);
            let up = g.value(l).item().unwrap();
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let (g, l) = loss(&store);
            let down = g.value(l).item().unwrap();
            store.get_mut(id).value.data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            diff = diff.max((num - analytic.data()[j]).abs());
            norm = norm.max(num.abs());
        }
    }
    assert!(diff / norm < FD_REL_TOL, "max abs error {diff:e} against scale {norm:e}");
}
