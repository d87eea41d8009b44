mod common;

use cflm::layout::{build_layout, build_open_layout, SequenceLayout};
use cflm::masks::oracle::visibility_oracle;
use cflm::masks::{
    build_ar_mask, build_dense_causal, build_pattern, build_prompt_local_ar, build_prompt_local_nar, AttentionMask,
    Pattern,
};
use cflm::Mode;
use common::cf;
use proptest::prelude::*;

fn matches_oracle(mask: &AttentionMask, layout: &SequenceLayout, pattern: Pattern) -> bool {
    (0..layout.len()).all(|q| (0..layout.len()).all(|k| mask.get(q, k) == visibility_oracle(layout, pattern, q, k)))
}

fn case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, bool)> {
    (2usize..=8, 0usize..=24, 0usize..6, 0usize..6, 0usize..=90, any::<bool>())
        .prop_map(|(g, extra, text, prompt, gen, eos)| (g, g + extra, text, prompt, gen, eos))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cf_mask_matches_oracle((g, n_ar, text, prompt, gen, eos) in case()) {
        let cfg = cf(g, n_ar, Mode::Cf);
        let layout = if eos { build_layout(text, prompt, gen, &cfg) } else { build_open_layout(text, prompt, gen, &cfg) };
        let mask = build_ar_mask(&layout, &cfg).unwrap();
        prop_assert!(mask.is_causal());
        let pattern = Pattern::Cf { n_ar };
        prop_assert!(matches_oracle(&mask, &layout, pattern));
    }

    #[test]
    fn cf_windows_and_spans_cover_every_earlier_raw((g, n_ar, text, prompt, gen, _eos) in case()) {
        let cfg = cf(g, n_ar, Mode::Cf);
        let layout = build_open_layout(text, prompt, gen, &cfg);
        let mask = build_ar_mask(&layout, &cfg).unwrap();
        for t in 0..gen {
            let q = layout.raw_position(t);
            for s in 0..t {
                let direct = mask.get(q, layout.raw_position(s));
                let summarized = s / g < gen / g && mask.get(q, layout.w_position(s / g));
                prop_assert!(direct || summarized, "raw {} cannot reach raw {}", t, s);
            }
        }
    }

    #[test]
    fn window_and_dense_match_oracle((_g, n_ar, text, prompt, gen, _eos) in case()) {
        let cfg = cf(1, n_ar, Mode::Window);
        let layout = build_layout(text, prompt, gen, &cfg);
        let window = build_prompt_local_ar(&layout, n_ar).unwrap();
        let pattern = Pattern::PromptLocalAr { n_ar };
        prop_assert!(matches_oracle(&window, &layout, pattern));
        let dense = build_dense_causal(&layout).unwrap();
        prop_assert!(matches_oracle(&dense, &layout, Pattern::DenseCausal));
    }

    #[test]
    fn nar_matches_oracle_and_is_symmetric_on_raws(n in 1usize..12, text in 0usize..5, prompt in 0usize..5, gen in 0usize..50) {
        let layout = build_open_layout(text, prompt, gen, &cf(1, 1, Mode::Window));
        let mask = build_prompt_local_nar(&layout, Some(n)).unwrap();
        let pattern = Pattern::PromptLocalNar { n_nar: Some(n) };
        prop_assert!(matches_oracle(&mask, &layout, pattern));
        for a in 0..gen {
            for b in 0..gen {
                let (pa, pb) = (layout.raw_position(a), layout.raw_position(b));
                prop_assert_eq!(mask.get(pa, pb), mask.get(pb, pa));
            }
        }
    }

    #[test]
    fn cf_without_complete_span_is_window(g in 2usize..=8, extra in 0usize..8, text in 0usize..5, gen in 0usize..8) {
        prop_assume!(gen < g);
        let n_ar = g + extra;
        let layout = build_layout(text, 1, gen, &cf(g, n_ar, Mode::Cf));
        let window_layout = build_layout(text, 1, gen, &cf(g, n_ar, Mode::Window));
        prop_assert_eq!(layout.kinds(), window_layout.kinds());
        prop_assert_eq!(
            build_pattern(&layout, Pattern::Cf { n_ar }).unwrap(),
            build_prompt_local_ar(&window_layout, n_ar).unwrap()
        );
    }

    #[test]
    fn wide_window_is_dense(n_ar in 1usize..40, text in 0usize..5, gen in 0usize..40) {
        prop_assume!(n_ar >= gen);
        let layout = build_layout(text, 2, gen, &cf(1, n_ar, Mode::Window));
        prop_assert_eq!(build_prompt_local_ar(&layout, n_ar).unwrap(), build_dense_causal(&layout).unwrap());
    }
}

#[test]
fn every_row_of_every_pattern_is_nonempty() {
    for g in 2..=5 {
        let cfg = cf(g, g + 1, Mode::Cf);
        let layout = build_layout(3, 2, 31, &cfg);
        assert!(build_ar_mask(&layout, &cfg).unwrap().first_empty_row().is_none());
    }
    let layout = build_open_layout(0, 0, 0, &cf(1, 1, Mode::Window));
    assert!(build_prompt_local_nar(&layout, Some(1)).unwrap().first_empty_row().is_none());
}
