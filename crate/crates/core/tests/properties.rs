mod common;

use beamlora::beam::AdapterSnapshot;
use beamlora::{
    operable_count, prune_expand, select_sets, softmax, BeamSchedule, Factor, Mode, ParamId,
    Precision, RunConfig, Tensor,
};
use common::*;
use proptest::prelude::*;

fn finite_vec(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, len)
}

fn prob_vec(max_r: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001..1.0f64, 1..=max_r).prop_map(|v| {
        let z: f64 = v.iter().sum();
        v.iter().map(|x| x / z).collect()
    })
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in finite_vec(1..32), c in -50.0..50.0f64) {
        let s = softmax(&Tensor::vector(v.clone())).unwrap();
        prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&x| x >= 0.0));
        let shifted = softmax(&Tensor::vector(v.iter().map(|x| x + c).collect())).unwrap();
        prop_assert!(s.max_abs_diff(&shifted).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (a, b, c) = (uniform(&[4, 4], &mut rng), uniform(&[4, 4], &mut rng), uniform(&[4, 4], &mut rng));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9);
    }

    #[test]
    fn threshold_is_monotone(p_init in 0.01..0.99f64, total in 2usize..10_000, t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let s = BeamSchedule::new(p_init, 2, total, total).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (lo, hi) = ((lo * total as f64) as usize, (hi * total as f64) as usize);
        let (plo, phi) = (s.threshold_at(lo).unwrap(), s.threshold_at(hi).unwrap());
        prop_assert!(plo <= phi);
        prop_assert!(plo >= p_init && phi <= 1.0);
    }

    #[test]
    fn operable_count_is_non_increasing_in_p(s in prob_vec(64), p1 in 0.0..1.0f64, p2 in 0.0..1.0f64) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let k_lo = operable_count(&s, lo).unwrap();
        let k_hi = operable_count(&s, hi).unwrap();
        prop_assert!(k_hi <= k_lo);
        prop_assert!(k_lo <= s.len() / 2);
        prop_assert_eq!(k_lo, operable_count_oracle(&s, lo));
        prop_assert_eq!(operable_count(&s, 1.0).unwrap(), 0);
    }

    #[test]
    fn select_sets_are_disjoint_extremes(s in prob_vec(32), frac in 0.0..=1.0f64, ties in any::<bool>()) {
        let s = if ties { vec![1.0 / s.len() as f64; s.len()] } else { s };
        let k = (frac * (s.len() / 2) as f64) as usize;
        let (p, e) = select_sets(&s, k).unwrap();
        prop_assert_eq!(p.len(), k);
        prop_assert_eq!(e.len(), k);
        prop_assert!(p.iter().all(|i| !e.contains(i)));
        let max_p = p.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        let min_e = e.iter().map(|&i| s[i]).fold(f64::INFINITY, f64::min);
        let rest: Vec<f64> = (0..s.len()).filter(|i| !p.contains(i) && !e.contains(i)).map(|i| s[i]).collect();
        prop_assert!(rest.iter().all(|&x| x >= max_p && x <= min_e));
        prop_assert!(select_sets(&s, s.len() / 2 + 1).is_err());
    }

    #[test]
    fn prune_expand_contract(seed in any::<u64>(), r in 2usize..12, frac in 0.0..=1.0f64) {
        let mut rng = rng(seed);
        let (d, k) = (r + 1, r + 2);
        let mut ad = random_adapter(d, k, r, true, &mut rng);
        let mut opt = random_optimizer(&ad, &mut rng);
        let donor = random_adapter(d, k, r, true, &mut rng);
        let donor_opt = random_optimizer(&donor, &mut rng);
        let snap = AdapterSnapshot {
            b: donor.factor(Factor::B).clone(),
            a: donor.factor(Factor::A).clone(),
            logits: donor.factor(Factor::Logits).clone(),
            moments: Factor::ALL
                .into_iter()
                .map(|f| (f, donor_opt.moments(ParamId::new(0, f)).unwrap().clone()))
                .collect(),
        };
        let kk = (frac * (r / 2) as f64) as usize;
        let (prune, expand) = disjoint_sets(r, kk, &mut rng);
        let before = ad.clone();
        let opt_before = opt.clone();
        let pairs = prune_expand(&mut ad, 0, &mut opt, &snap, &prune, &expand).unwrap();
        prop_assert_eq!(pairs.len(), kk);

        for &(dst, src) in &pairs {
            prop_assert!(ad.factor(Factor::B).column(dst).bitwise_eq(&snap.b.column(src)));
            prop_assert!(ad.factor(Factor::A).row(dst).bitwise_eq(&snap.a.row(src)));
        }
        for i in (0..r).filter(|i| !prune.contains(i) && !expand.contains(i)) {
            prop_assert!(ad.factor(Factor::B).column(i).bitwise_eq(&before.factor(Factor::B).column(i)));
            prop_assert!(ad.factor(Factor::A).row(i).bitwise_eq(&before.factor(Factor::A).row(i)));
            prop_assert_eq!(
                ad.factor(Factor::Logits).data()[i].to_bits(),
                before.factor(Factor::Logits).data()[i].to_bits()
            );
        }
        if kk == 0 {
            prop_assert_eq!(&ad, &before);
            prop_assert_eq!(&opt, &opt_before);
        }
        for f in Factor::ALL {
            prop_assert!(opt.moments(ParamId::new(0, f)).unwrap().v.data().iter().all(|&v| v >= 0.0));
        }
        prop_assert!((ad.scores().sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rank_terms_sum_to_the_full_update(seed in any::<u64>(), d in 1usize..10, k in 1usize..10) {
        let mut rng = rng(seed);
        let r = d.min(k);
        let ad = random_adapter(d, k, r, true, &mut rng);
        let mut sum = Tensor::zeros(&[d, k]);
        for i in 0..r {
            sum = sum.add(&ad.delta_w(i, false).unwrap()).unwrap();
        }
        prop_assert!(sum.max_abs_diff(&ad.delta_w_total()).unwrap() <= 1e-9);
    }

    #[test]
    fn forward_matches_rank_sum_and_merge(seed in any::<u64>(), d in 1usize..10, k in 1usize..10, n in 1usize..6, scored in any::<bool>()) {
        let mut rng = rng(seed);
        let r = d.min(k);
        let ad = random_adapter(d, k, r, scored, &mut rng);
        let x = uniform(&[k, n], &mut rng);
        let y = ad.forward(&x).unwrap();
        let oracle = Tensor::new(vec![d, n], rank_sum_forward(&ad, &x)).unwrap();
        prop_assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-9);
        let merged = ad.merge();
        prop_assert!(merged.forward(&x).unwrap().max_abs_diff(&y).unwrap() <= 1e-9);
        let dense = merged.dense_weight().unwrap().matmul(&x).unwrap();
        prop_assert!(dense.max_abs_diff(&y).unwrap() <= 1e-9);
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        rank in 1usize..8,
        p_init in 0.01..0.99f64,
        delta_t in 2usize..200,
        lr in 1e-5..1.0f64,
        steps in 1usize..5000,
        mode in prop::sample::select(vec![Mode::Beamlora, Mode::Lora, Mode::PruneOnly, Mode::RandomSelect, Mode::StaticP]),
        f32 in any::<bool>(),
    ) {
        let mut cfg = RunConfig {
            seed,
            mode,
            ..RunConfig::default()
        };
        cfg.precision = if f32 { Precision::F32 } else { Precision::F64 };
        cfg.model.rank = rank;
        cfg.beam.p_init = p_init;
        cfg.beam.delta_t = delta_t;
        cfg.optimizer.lr = lr;
        cfg.train.steps = steps;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
