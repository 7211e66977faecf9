// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use langconf::attribution::top_neurons;
use langconf::corpus::{join_documents, split_documents};
use langconf::langid::segment_lines_with;
use langconf::metrics::{line_accuracy, line_pass_rate, ScoredResponse};
use langconf::model::{EditMask, FfnKind, Model, NeuronId, Record, TransformerConfig};
use proptest::prelude::*;

fn model(gated: bool) -> &'static Model {
    static PLAIN: OnceLock<Model> = OnceLock::new();
    static GATED: OnceLock<Model> = OnceLock::new();
    let cell = if gated { &GATED } else { &PLAIN };
    cell.get_or_init(|| {
        let cfg = TransformerConfig {
            n_layers: 3,
            d_model: 16,
            ffn_width: 24,
            n_heads: 2,
            max_seq_len: 24,
            ffn_kind: if gated { FfnKind::Gated } else { FfnKind::TwoMatrix },
            ..TransformerConfig::default()
        };
        Model::init(cfg, 99, "prop").unwrap()
    })
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..258, 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_stream_is_additive(t in tokens(), gated in any::<bool>()) {
        let m = model(gated);
        let tr = m.forward(&t, Record::Residual, None).unwrap();
        for l in 0..m.config().n_layers {
            for p in 0..t.len() {
                let (h, a, f, o) = (tr.h_prev(l, p), tr.attn_out(l, p), tr.ffn_out(l, p), tr.h_out(l, p));
                for i in 0..h.len() {
                    let sum = h[i] + a[i] + f[i];
                    prop_assert!((sum - o[i]).abs() <= 1e-5 * (1.0 + o[i].abs()));
                }
                if l + 1 < m.config().n_layers {
                    prop_assert_eq!(o, tr.h_prev(l + 1, p));
                }
            }
        }
    }

    #[test]
    fn ffn_is_the_sum_of_neuron_contributions(t in tokens(), gated in any::<bool>()) {
        let m = model(gated);
        let tr = m.forward(&t, Record::Coefficients, None).unwrap();
        let p = t.len() - 1;
        for l in 0..m.config().n_layers {
            let r: Vec<f32> = tr.h_prev(l, p).iter().zip(tr.attn_out(l, p)).map(|(a, b)| a + b).collect();
            let (coeffs, recon) = m.ffn_decompose(l, &r).unwrap();
            let traced = tr.coeffs(l, p).unwrap();
            for (a, b) in coeffs.iter().zip(traced) {
                prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
            for (a, b) in recon.iter().zip(tr.ffn_out(l, p)) {
                prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn masked_coefficients_are_exactly_zero(
        t in tokens(),
        picks in prop::collection::vec((0usize..3, 0usize..24), 0..10),
    ) {
        let m = model(false);
        let mask = EditMask::from_neurons(picks.iter().map(|&(l, k)| NeuronId::new(l, k)));
        let tr = m.forward(&t, Record::Coefficients, Some(&mask)).unwrap();
        for &(l, k) in &picks {
            for p in 0..t.len() {
                prop_assert_eq!(tr.coeffs(l, p).unwrap()[k].to_bits(), 0.0f32.to_bits());
            }
        }
        if picks.is_empty() {
            let plain = m.forward(&t, Record::Coefficients, None).unwrap();
            prop_assert_eq!(plain, tr);
        }
    }

    #[test]
    fn output_distributions_sum_to_one(t in tokens()) {
        let m = model(false);
        let tr = m.forward(&t, Record::Logits, None).unwrap();
        for p in 0..t.len() {
            let s: f32 = tr.probs_at(p).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn line_spans_tile_the_text(text in "[a-c \n]{0,40}", min in 1usize..6) {
        let lines = segment_lines_with(&text, min);
        let n = text.chars().count();
        if text.is_empty() {
            prop_assert!(lines.is_empty());
        } else {
            prop_assert_eq!(lines.len(), text.matches('\n').count() + 1);
            prop_assert_eq!(lines[0].span.0, 0);
            prop_assert_eq!(lines.last().unwrap().span.1, n);
            for w in lines.windows(2) {
                prop_assert_eq!(w[0].span.1 + 1, w[1].span.0);
            }
        }
    }

    #[test]
    fn top_neurons_are_distinct_and_sorted(scores in prop::collection::vec(-3.0f64..3.0, 1..40), n in 1usize..10) {
        let width = 8;
        let top = top_neurons(&scores, width, n);
        prop_assert_eq!(top.len(), n.min(scores.len()));
        let flat: Vec<usize> = top.iter().map(|id| id.flat(width)).collect();
        for w in flat.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        let mut dedup = flat.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), flat.len());
    }

    #[test]
    fn line_metrics_are_bounded_and_order_free(
        rows in prop::collection::vec(prop::collection::vec(prop::option::of(prop::bool::ANY), 0..5), 1..8),
    ) {
        let responses: Vec<ScoredResponse> = rows
            .iter()
            .map(|r| {
                let labels: Vec<Option<&str>> = r.iter().map(|x| x.map(|b| if b { "A" } else { "B" })).collect();
                ScoredResponse::new("A", &labels)
            })
            .collect();
        let lpr = line_pass_rate(&responses).unwrap();
        prop_assert!((0.0..=100.0).contains(&lpr));
        let mut rev = responses.clone();
        rev.reverse();
        prop_assert_eq!(lpr, line_pass_rate(&rev).unwrap());
        match line_accuracy(&responses) {
            Ok(acc) => {
                prop_assert!((0.0..=100.0).contains(&acc));
                prop_assert_eq!(acc, line_accuracy(&rev).unwrap());
            }
            Err(_) => prop_assert!(responses.iter().all(|r| r.scored() == 0)),
        }
    }

    #[test]
    fn documents_round_trip_through_text(docs in prop::collection::vec("[a-z]{1,5}( [a-z]{1,5}){0,3}(\n[a-z]{1,5}){0,2}", 0..6)) {
        prop_assert_eq!(split_documents(&join_documents(&docs)), docs);
    }
}
