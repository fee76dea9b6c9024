use comchain::complexity::*;
use comchain::modelzoo::{param_count, vit_ref, ModelConfig};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = (ModelConfig, usize, usize)> {
    (1usize..17, 1usize..25, 1usize..13, 1usize..13, 1usize..9, 0usize..11).prop_map(
        |(iw, id, tw, td, passes, batch_pow)| {
            let cfg = vit_ref("random", (64 * iw, id), (64 * tw, td));
            (cfg, passes, 1 << batch_pow)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cost_identities_hold_exactly((cfg, passes, batch) in config()) {
        let f = forward_macs(&cfg, SampleSpec { text_passes: passes });
        let b = training_macs(f.total, f.first, param_count(&cfg), batch);
        prop_assert_eq!(b.c_b, 2.0 * b.c_f - b.c_f_first);
        prop_assert_eq!(b.c_t, b.c_f + b.c_b + b.c_u);
        prop_assert!(b.c_f > 0.0 && b.c_f_first > 0.0 && b.c_u > 0.0);
    }

    #[test]
    fn forward_is_monotone_in_width_and_depth((cfg, passes, _) in config()) {
        let s = SampleSpec { text_passes: passes };
        let base = forward_macs(&cfg, s).total;
        let mut wider = cfg.clone();
        wider.image.width += 64;
        prop_assert!(forward_macs(&wider, s).total > base);
        let mut deeper = cfg.clone();
        deeper.text.depth += 1;
        prop_assert!(forward_macs(&deeper, s).total > base);
    }

    #[test]
    fn accumulation_is_prefix_sum(values in prop::collection::vec(0.0f64..1e12, 1..8)) {
        let acc = accumulate(&values);
        let mut running = 0.0;
        for (a, v) in acc.iter().zip(&values) {
            running += v;
            prop_assert_eq!(*a, running);
        }
    }
}

#[test]
fn reference_training_to_forward_ratios() {
    for c in reference_checks().unwrap() {
        let ratio = c.training_g / c.forward_g;
        assert!(ratio > 2.8 && ratio < 3.1, "{}: {ratio}", c.model);
        if ["vit_t16_ref", "vit_s16_ref", "vit_b16_ref", "vit_l16_ref"].contains(&c.model.as_str()) {
            let published = c.paper_training_g / c.paper_forward_g;
            assert!((ratio - published).abs() <= 0.05, "{}: {ratio} vs {published}", c.model);
        }
    }
}
