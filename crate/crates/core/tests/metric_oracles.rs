use contextcap::geometry::Box3D;
use contextcap::metrics::{self, oracle, CiderD, EvalRecord, ScoredBox};
use proptest::prelude::*;

const WORDS: [&str; 5] = ["a", "red", "chair", "the", "wall"];

fn sentence(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..=max)
        .prop_map(|w| w.into_iter().map(str::to_string).collect())
}

fn refs() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(sentence(8), 1..=3)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn corners(b: &Box3D) -> ([f64; 3], [f64; 3]) {
    (b.min(), b.max())
}

fn arb_box() -> impl Strategy<Value = Box3D> {
    // coarse grid so exact overlaps and IoU ties actually happen
    (prop::array::uniform3(0i32..6), prop::array::uniform3(2i32..5))
        .prop_map(|(c, s)| Box3D::new(c.map(|v| v as f64 * 0.5), s.map(|v| v as f64 * 0.5)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cider_matches_oracle(corpus in prop::collection::vec(refs(), 1..=3), cand in sentence(8)) {
        let cider = CiderD::new(&corpus).unwrap();
        for refs in &corpus {
            let fast = cider.score(&cand, refs);
            let slow = oracle::cider_d(&cand, refs, &corpus);
            prop_assert!(close(fast, slow), "{fast} vs {slow}");
            prop_assert!((0.0..=10.0 + 1e-9).contains(&fast));
        }
    }

    #[test]
    fn bleu_rouge_meteor_match_oracles(cand in sentence(8), refs in refs()) {
        let pairs = [
            (metrics::bleu4(&cand, &refs), oracle::bleu4(&cand, &refs)),
            (metrics::rouge_l(&cand, &refs), oracle::rouge_l(&cand, &refs)),
            (metrics::meteor_exact(&cand, &refs), oracle::meteor_exact(&cand, &refs)),
        ];
        for (fast, slow) in pairs {
            prop_assert!(close(fast, slow), "{fast} vs {slow}");
            prop_assert!((0.0..=1.0 + 1e-12).contains(&fast));
        }
        for r in &refs {
            prop_assert_eq!(metrics::lcs_len(&cand, r), oracle::lcs_len(&cand, r));
        }
    }

    #[test]
    fn gating_matches_oracle(items in prop::collection::vec((prop::option::of(0.0f64..1.0), sentence(5), refs()), 1..=5)) {
        let records: Vec<EvalRecord> = items
            .iter()
            .enumerate()
            .map(|(i, (iou, g, r))| EvalRecord { gt_index: i, matched: iou.map(|v| (i, v)), generated: g.clone(), references: r.clone() })
            .collect();
        let fast = metrics::gate_and_aggregate(&records, metrics::rouge_l);
        let slow = oracle::gated_mean(&items.iter().map(|(iou, g, r)| (*iou, oracle::rouge_l(g, r))).collect::<Vec<_>>());
        prop_assert!(close(fast, slow));
    }

    #[test]
    fn gate_is_monotone(items in prop::collection::vec((0.0f64..=0.5, sentence(5), refs()), 1..=5), raise in 0usize..5, to in 0.51f64..1.0) {
        let mut records: Vec<EvalRecord> = items
            .iter()
            .enumerate()
            .map(|(i, (iou, g, r))| EvalRecord { gt_index: i, matched: Some((i, *iou)), generated: g.clone(), references: r.clone() })
            .collect();
        let before = metrics::gate_and_aggregate(&records, metrics::meteor_exact);
        let k = raise % records.len();
        records[k].matched = Some((k, to));
        prop_assert!(metrics::gate_and_aggregate(&records, metrics::meteor_exact) >= before);
    }

    #[test]
    fn ap_matches_oracle(
        preds in prop::collection::vec((0i32..4, arb_box()), 0..=5),
        gt in prop::collection::vec(arb_box(), 1..=5),
    ) {
        let fast_in: Vec<(f64, Box3D)> = preds.iter().map(|(c, b)| (*c as f64 * 0.25, *b)).collect();
        let slow_in: Vec<(f64, ([f64; 3], [f64; 3]))> = fast_in.iter().map(|(c, b)| (*c, corners(b))).collect();
        let slow_gt: Vec<([f64; 3], [f64; 3])> = gt.iter().map(corners).collect();
        let fast = metrics::average_precision(&fast_in, &gt);
        let slow = oracle::average_precision(&slow_in, &slow_gt);
        prop_assert!(close(fast, slow), "{fast} vs {slow}");
    }

    #[test]
    fn map_averages_per_category_oracles(
        preds in prop::collection::vec((0usize..2, 0i32..4, arb_box()), 0..=5),
        gt in prop::collection::vec((0usize..2, arb_box()), 1..=5),
    ) {
        let cats = ["chair", "table"];
        let scored: Vec<ScoredBox> = preds
            .iter()
            .map(|(c, conf, b)| ScoredBox { category: cats[*c].to_string(), bbox: *b, confidence: *conf as f64 })
            .collect();
        let labelled: Vec<(String, Box3D)> = gt.iter().map(|(c, b)| (cats[*c].to_string(), *b)).collect();
        let mut aps = Vec::new();
        for c in 0..2 {
            let g: Vec<_> = gt.iter().filter(|(k, _)| *k == c).map(|(_, b)| corners(b)).collect();
            if g.is_empty() {
                continue;
            }
            let p: Vec<_> = preds.iter().filter(|(k, _, _)| *k == c).map(|(_, conf, b)| (*conf as f64, corners(b))).collect();
            aps.push(oracle::average_precision(&p, &g));
        }
        let slow = aps.iter().sum::<f64>() / aps.len() as f64;
        prop_assert!(close(metrics::map_at_0_5iou(&scored, &labelled), slow));
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn cider_identical_pair_is_exactly_ten() {
    let r = toks("this is a brown chair it is to the left of the table");
    let cider = CiderD::new(&[vec![r.clone()]]).unwrap();
    assert_eq!(cider.score(&r, &[r.clone()]), 10.0);
    assert_eq!(oracle::cider_d(&r, &[r.clone()], &[vec![r.clone()]]), 10.0);
}

#[test]
fn three_sentence_corpus_against_oracle() {
    let corpus = vec![
        vec![toks("this is a red chair it is next to the wall")],
        vec![toks("this is a blue table it is in the middle of the room")],
        vec![toks("this is a red lamp it is the second lamp from the left")],
    ];
    let cider = CiderD::new(&corpus).unwrap();
    let cands = vec![toks("this is a red chair"), toks("a blue table in the room"), toks("red lamp")];
    let (scores, mean) = cider.corpus_score(&cands, &corpus);
    for ((c, r), s) in cands.iter().zip(&corpus).zip(&scores) {
        assert!(close(*s, oracle::cider_d(c, r, &corpus)));
    }
    assert!(close(mean, scores.iter().sum::<f64>() / 3.0));
}

#[test]
fn three_box_pr_curve() {
    let g = |x: f64| Box3D::new([x, 0.0, 0.0], [1.0; 3]);
    let gt = vec![g(0.0), g(3.0), g(6.0)];
    // ranking: hit, miss, hit, duplicate of the first hit
    let preds = vec![(0.9, g(0.0)), (0.8, g(20.0)), (0.7, g(3.05)), (0.6, g(0.0))];
    // precision envelope at the two hits: 1 and 2/3, each worth recall 1/3
    let expect = (1.0 + 2.0 / 3.0) / 3.0;
    assert!(close(metrics::average_precision(&preds, &gt), expect));
    let oracle_preds: Vec<_> = preds.iter().map(|(c, b)| (*c, corners(b))).collect();
    let oracle_gt: Vec<_> = gt.iter().map(corners).collect();
    assert!(close(oracle::average_precision(&oracle_preds, &oracle_gt), expect));
}
