use emalab_core::encoder::{linear, LayerSpec, StageSpec};
use emalab_core::eval::{embedding_stats, knn_eval};
use emalab_core::momentum::Mode;
use emalab_core::objectives::{loss_negcos, FeatureQueue};
use emalab_core::*;
use proptest::prelude::*;

fn tiny_encoder(seed: u64) -> ParamSet {
    let stages = StageName::TARGET
        .iter()
        .map(|&name| {
            let mut layers = vec![linear(3, 3)];
            if name == StageName::Stem {
                layers.push(LayerSpec::Bn);
            }
            StageSpec::new(name, layers)
        })
        .collect();
    build_encoder(&EncoderConfig {
        input_dim: 3,
        seed,
        stages,
    })
    .unwrap()
}

fn stored(stage: &emalab_core::encoder::StageParams) -> Vec<f64> {
    let mut copy = stage.clone();
    copy.zip_stored_mut(stage)
        .unwrap()
        .into_iter()
        .flat_map(|(_, v)| v.to_vec())
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn ema_moves_each_value_toward_online(s1 in 0u64..1000, s2 in 0u64..1000, beta in 0.0f64..=1.0) {
        let online = tiny_encoder(s1);
        let policy = MomentumPolicy::full(beta).unwrap();
        let mut target = init_target(&tiny_encoder(s2), &policy).unwrap();
        let before = target.clone();
        ema_update(&mut target, &online, &policy).unwrap();
        for ((new, old), th) in target.stages.iter().zip(&before.stages).zip(&online.stages) {
            for ((n, o), t) in stored(new).iter().zip(stored(old)).zip(stored(th)) {
                prop_assert_eq!(n.to_bits(), (beta * o + (1.0 - beta) * t).to_bits());
                prop_assert!((n - t).abs() <= (o - t).abs() + 1e-15);
            }
        }
    }

    #[test]
    fn frozen_stages_never_move(s1 in 0u64..1000, s2 in 0u64..1000) {
        let online = tiny_encoder(s1);
        let policy = MomentumPolicy::full(0.5).unwrap().with_mode(StageName::Projector, Mode::Frozen).unwrap();
        let mut target = init_target(&tiny_encoder(s2), &policy).unwrap();
        let before = target.stage(StageName::Projector).unwrap().clone();
        ema_update(&mut target, &online, &policy).unwrap();
        prop_assert!(target.stage(StageName::Projector).unwrap().bit_eq(&before));
    }

    #[test]
    fn negcos_is_view_symmetric_and_scale_invariant(
        p1 in matrix(3, 4), p2 in matrix(3, 4), z1 in matrix(3, 4), z2 in matrix(3, 4), k in 0.1f64..10.0
    ) {
        let eval = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| {
            let mut t = Tape::new();
            let (a, b) = (t.leaf(a.clone(), true).unwrap(), t.leaf(b.clone(), true).unwrap());
            let (c, d) = (t.constant(c.clone()).unwrap(), t.constant(d.clone()).unwrap());
            let l = loss_negcos(&mut t, a, b, c, d).unwrap();
            t.value(l).data()[0]
        };
        let base = eval(&p1, &p2, &z1, &z2);
        prop_assert_eq!(base.to_bits(), eval(&p2, &p1, &z2, &z1).to_bits());
        prop_assert!((base - eval(&p1.map(|v| v * k), &p2, &z1, &z2.map(|v| v * k))).abs() <= 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn queue_rows_stay_unit_and_bounded(rows in matrix(5, 3), cap in 0usize..4) {
        let mut q = FeatureQueue::new(cap);
        q.push(&rows.map(|v| v + 4.0)).unwrap();
        prop_assert!(q.len() <= cap);
        for r in q.rows() {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn knn_ignores_positive_rescaling(train in matrix(6, 3), test in matrix(4, 3), k in 0.01f64..100.0) {
        let ty = [0, 1, 2, 0, 1, 2];
        let qy = [0, 1, 2, 0];
        let a = knn_eval(&train, &ty, &test, &qy).unwrap();
        let b = knn_eval(&train.map(|v| v * k), &ty, &test.map(|v| v * k), &qy).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn embedding_spread_is_zero_only_for_identical_rows(rows in matrix(4, 3)) {
        let s = embedding_stats(&rows).unwrap();
        let unit = |i: usize| {
            let r = rows.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect::<Vec<_>>()
        };
        let identical = (1..4).all(|i| unit(i) == unit(0));
        prop_assert_eq!(s.mean == 0.0, identical);
    }

    #[test]
    fn views_keep_shape(x in matrix(4, 5), seed in 0u64..100) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = data::make_views(&x, &data::AugSpec::default(), &mut rng);
        prop_assert_eq!(a.shape(), x.shape());
        prop_assert_eq!(b.shape(), x.shape());
    }
}
