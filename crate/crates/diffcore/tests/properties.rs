use diffcore::{cosine_sim, kl_balanced, symexp, symlog, Checkpoint, Graph, ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn symexp_inverts_symlog(x in -1e6f64..1e6) {
        let back = symexp(symlog(x));
        prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let mut g = Graph::<f64>::new();
        let av = g.input(Tensor::from_f64(&[1, 4], &a).unwrap());
        let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
        let sv = g.input(Tensor::from_f64(&[1, 4], &scaled).unwrap());
        let bv = g.input(Tensor::from_f64(&[1, 4], &b).unwrap());
        let base = cosine_sim(&mut g, av, bv).unwrap();
        let other = cosine_sim(&mut g, sv, bv).unwrap();
        prop_assert!((g.scalar(base) - g.scalar(other)).abs() < 1e-12);
        prop_assert!(g.scalar(base).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn kl_value_ignores_alpha(
        p in prop::collection::vec(-3.0f64..3.0, 6),
        q in prop::collection::vec(-3.0f64..3.0, 6),
        alpha in 0.0f64..=1.0,
    ) {
        let value = |alpha: f64| {
            let mut g = Graph::<f64>::new();
            let pv = g.input(Tensor::from_f64(&[1, 6], &p).unwrap());
            let qv = g.input(Tensor::from_f64(&[1, 6], &q).unwrap());
            let k = kl_balanced(&mut g, pv, qv, 3, alpha, 0.0);
            g.scalar(k)
        };
        let reference = value(0.5);
        prop_assert!(reference >= 0.0);
        prop_assert!((value(alpha) - reference).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>(), 1..40)) {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::from_vec(&[values.len()], values.clone()).unwrap());
        let mut ck = Checkpoint::new(serde_json::json!({"variant": "flat"}));
        ck.push_store("wm", &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (name, t) = &back.tensors[0];
        prop_assert_eq!(name, "wm/a");
        let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, orig);
        prop_assert_eq!(&back.metadata["variant"], "flat");
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::from_vec(&[2, 2], vec![1.5, -0.25, 3.0, 1e-7]).unwrap());
    store.add("b", Tensor::from_vec(&[1, 2], vec![0.0, -2.0]).unwrap());
    let mut ck = Checkpoint::new(serde_json::json!({}));
    ck.push_store("net", &store);
    ck.save(&path).unwrap();

    let mut fresh = store.clone();
    for id in fresh.ids().collect::<Vec<_>>() {
        fresh.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Checkpoint::load(&path).unwrap().load_store("net", &mut fresh).unwrap();
    for ((_, a), (_, b)) in fresh.iter().zip(store.iter()) {
        assert_eq!(a.value, b.value);
    }
    assert!(Checkpoint::load(&path).unwrap().load_store("other", &mut fresh).is_err());
}
