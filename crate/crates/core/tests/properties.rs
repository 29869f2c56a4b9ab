use genmatch::generators::ModelClass;
use genmatch::marginal::Combinators;
use genmatch::sim::{euler_step, trajectory_rng, JumpSchedule};
use genmatch::train::{Arch, FieldNet, Heads, VelocityParam};
use genmatch::{CondPath, Dataset, GenOut, GeneratorSpec, JumpBins, MarginalModel, Schedule, State};
use proptest::prelude::*;

fn schedules() -> impl Strategy<Value = Schedule> {
    prop_oneof![
        Just(Schedule::Linear),
        Just(Schedule::Cosine),
        (0.2f64..4.0).prop_map(|p| Schedule::polynomial(p).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_a_monotone_interpolant(s in schedules(), t in 0.0f64..1.0, dt in 0.0f64..0.2) {
        prop_assert!(s.kappa(0.0).unwrap().abs() < 1e-12);
        prop_assert!((s.kappa(1.0).unwrap() - 1.0).abs() < 1e-12);
        let (k, kd) = s.eval(t).unwrap();
        prop_assert!((0.0..=1.0).contains(&k));
        prop_assert!(kd >= 0.0);
        let u = (t + dt).min(1.0);
        prop_assert!(s.kappa(u).unwrap() >= k - 1e-15);
    }

    #[test]
    fn condot_marginals_are_well_formed(
        zs in prop::collection::vec(-2.0f64..2.0, 1..5),
        x in -4.0f64..4.0,
        t in 0.0f64..0.99,
        w in 0.0f64..1.0,
    ) {
        let data = Dataset::euclid(zs.iter().map(|z| vec![*z]).collect(), None).unwrap();
        let spec = GeneratorSpec::superposition(vec![(ModelClass::Flow, w), (ModelClass::Jump, 1.0 - w)]).unwrap();
        let m = MarginalModel::with(CondPath::condot(1).unwrap(), data, spec, JumpBins::default(), Combinators::default()).unwrap();
        let g = m.genout(t, &State::euclid(vec![x])).unwrap();
        prop_assert!(g.check_invariants().is_ok());
        prop_assert!(g.velocity[0].is_finite());
    }

    #[test]
    fn mixture_and_ctmc_marginals_are_well_formed(
        zs in prop::collection::vec(-0.9f64..0.9, 1..4),
        toks in prop::collection::vec(0usize..4, 1..4),
        x in -1.0f64..1.0,
        tok in 0usize..4,
        t in 0.0f64..0.99,
    ) {
        let n = zs.len().min(toks.len());
        let pts: Vec<State> = (0..n).map(|i| State { x: vec![zs[i]], tokens: vec![toks[i]] }).collect();
        let data = Dataset::new(pts, None).unwrap();
        let path = CondPath::mixture_uniform(-1.0, 1.0, Schedule::Linear, 1)
            .unwrap()
            .product(CondPath::mixture_discrete(4, Schedule::Linear, 1).unwrap());
        let m = MarginalModel::new(path, data, GeneratorSpec::jump()).unwrap();
        let g = m.genout(t, &State { x: vec![x], tokens: vec![tok] }).unwrap();
        prop_assert!(g.check_invariants().is_ok());
        for (y, q) in g.rates[0].iter().enumerate() {
            if y != tok {
                prop_assert!(*q >= 0.0);
            }
        }
    }

    #[test]
    fn conditional_path_hits_its_endpoint(z in -3.0f64..3.0, tok in 0usize..6, seed in 0u64..1000) {
        let path = CondPath::condot(1)
            .unwrap()
            .product(CondPath::mixture_uniform(-3.0, 3.0, Schedule::Cosine, 1).unwrap())
            .product(CondPath::mixture_discrete(6, Schedule::Linear, 1).unwrap());
        let zs = State { x: vec![z, z], tokens: vec![tok] };
        let mut rng = trajectory_rng(seed, 0);
        prop_assert_eq!(path.sample_cond(&zs, 1.0, &mut rng).unwrap(), zs.clone());
        let x0 = path.sample_cond(&zs, 0.0, &mut rng).unwrap();
        prop_assert!((-3.0..=3.0).contains(&x0.x[1]));
        prop_assert!(x0.tokens[0] < 6);
    }

    #[test]
    fn network_heads_are_valid_distributions(seed in 0u64..500, x in -5.0f64..5.0, tok in 0usize..3, t in 0.0f64..0.999) {
        let arch = Arch {
            euclid: 1,
            vocab: vec![3],
            embed: 4,
            width: 8,
            depth: 2,
            heads: Heads { velocity: true, jump: true, rates: true },
            bins: JumpBins::new(-1.0, 1.0, 5).unwrap(),
            velocity_param: VelocityParam::Direct,
        };
        let net = FieldNet::init(arch, &mut trajectory_rng(seed, 1)).unwrap();
        let s = State { x: vec![x], tokens: vec![tok] };
        let (o, _) = net.forward(&s, t).unwrap();
        prop_assert!(o.intensity[0] > 0.0);
        prop_assert!((o.bin_probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(o.rates[0].iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(net.genout(t, &s).unwrap().check_invariants().is_ok());
        prop_assert_eq!(net.forward(&s, t).unwrap().0, o);
    }

    #[test]
    fn superposition_weights_sum_to_one(ws in prop::collection::vec(0.01f64..5.0, 2..4)) {
        let total: f64 = ws.iter().sum();
        let classes = [ModelClass::Flow, ModelClass::Jump, ModelClass::Diffusion];
        let parts: Vec<(ModelClass, f64)> = ws.iter().zip(classes).map(|(w, c)| (c, w / total)).collect();
        let spec = GeneratorSpec::superposition(parts).unwrap();
        prop_assert!((spec.parts().iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_generator_leaves_state_fixed(xs in prop::collection::vec(-10.0f64..10.0, 1..4), t in 0.0f64..0.9, seed in 0u64..100) {
        let x = State::euclid(xs.clone());
        let g = GenOut::flow(vec![0.0; xs.len()]);
        let s = euler_step(&x, &g, t, 0.05, JumpSchedule::LinearHazard, None, &mut trajectory_rng(seed, 0)).unwrap();
        prop_assert_eq!(s.state, x);
    }
}
