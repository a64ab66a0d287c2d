use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use simrec_core::agents::RandomPolicy;
use simrec_core::basemodels::StaHyper;
use simrec_core::config::PipelineConfig;
use simrec_core::harness::{self, generate_world, read_trace_csv, write_trace_csv, EvalReport, WorldSpec};
use simrec_core::pipeline::Bundle;

fn bundle() -> &'static (Bundle, PipelineConfig) {
    static B: OnceLock<(Bundle, PipelineConfig)> = OnceLock::new();
    B.get_or_init(|| {
        let world = generate_world(&WorldSpec {
            users: 30,
            items: 60,
            categories: 3,
            seed: 11,
            ..WorldSpec::default()
        })
        .unwrap();
        let mut cfg = PipelineConfig {
            seed: 11,
            sta: StaHyper { epochs: 1, ..StaHyper::default() },
            ..PipelineConfig::default()
        };
        cfg.sync_seeds();
        (Bundle::from_world(&world, &cfg).unwrap(), cfg)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episodes_respect_masking_and_recompute(seed in any::<u64>(), episodes in 1usize..6, horizon in 1usize..15) {
        let (bundle, base) = bundle();
        let mut cfg = base.clone();
        cfg.env.horizon = horizon;
        let factory = bundle.factory(&cfg).unwrap();
        let mut policy = RandomPolicy::new(seed);
        let traces = harness::run_episodes(&factory, &bundle.categories, &mut policy, episodes, seed).unwrap();
        prop_assert_eq!(traces.len(), episodes);
        for (ep, t) in traces.iter().enumerate() {
            prop_assert!(t.is_valid());
            prop_assert_eq!(t.steps.len(), horizon);
            let mut shown = BTreeSet::new();
            for s in &t.steps {
                prop_assert!(shown.insert(s.action.clone()), "repeated {}", s.action);
                prop_assert!(s.reward <= 1);
            }
            let start = factory.episode(seed, ep).unwrap();
            prop_assert_eq!(&start.user_id, &t.user_id);
        }

        let report = EvalReport::from_traces(&traces, horizon, seed, "random", "d");
        let totals: Vec<f64> = traces.iter().map(|t| t.total_reward() as f64).collect();
        prop_assert_eq!(report.total_reward, totals.iter().sum::<f64>());
        prop_assert!((report.avg_reward - report.total_reward / episodes as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&report.liking_pct));
        prop_assert_eq!(report.short_horizon, horizon < harness::LIKING_WINDOW);

        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &traces).unwrap();
        let back = read_trace_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.iter().map(|t| &t.steps).collect::<Vec<_>>(), traces.iter().map(|t| &t.steps).collect::<Vec<_>>());

        let mut again = RandomPolicy::new(seed);
        let replay = harness::run_episodes(&factory, &bundle.categories, &mut again, episodes, seed).unwrap();
        prop_assert_eq!(replay, traces);
    }
}
