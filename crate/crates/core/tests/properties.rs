use lcc_core::artifact::ArtifactMeta;
use lcc_core::data::{gen_context, Vocab};
use lcc_core::kernels::softmax_in_place;
use lcc_core::kv::KvCache;
use lcc_core::model::Fingerprint;
use lcc_core::{build_segment_mask, BufferArtifact, Segment, SegmentLayout, SegmentSet, StorageDtype, Tape, Tensor};
use proptest::prelude::*;

fn layout() -> impl Strategy<Value = SegmentLayout> {
    (0usize..6, 1usize..5, 0usize..4, 0usize..4).prop_map(|(c, k, q, r)| SegmentLayout::new(c, k, q, r).unwrap())
}

proptest! {
    #[test]
    fn mask_never_looks_ahead_and_every_row_sees_something(l in layout()) {
        let m = build_segment_mask(&l);
        for i in 0..l.len() {
            prop_assert!(m.allowed(i, i));
            for j in i + 1..l.len() {
                prop_assert!(!m.allowed(i, j));
            }
        }
    }

    #[test]
    fn generation_rows_reach_context_only_through_the_buffer(l in layout()) {
        let m = build_segment_mask(&l);
        let seg = l.segments();
        for i in 0..l.len() {
            for j in 0..=i {
                let (a, b) = (seg[i], seg[j]);
                let expect = match a {
                    Segment::Context => b == Segment::Context,
                    Segment::Buffer => matches!(b, Segment::Context | Segment::Buffer),
                    Segment::Query | Segment::Response => b != Segment::Context,
                };
                prop_assert_eq!(m.allowed(i, j), expect, "({}, {})", i, j);
            }
        }
    }

    #[test]
    fn segment_set_bits_roundtrip(bits in 0u8..16) {
        let s = SegmentSet::from_bits(bits).unwrap();
        prop_assert_eq!(s.bits(), bits);
        prop_assert_eq!(SegmentSet::of(&s.iter().collect::<Vec<_>>()), s);
    }

    #[test]
    fn segment_set_rejects_unknown_bits(bits in 16u8..) {
        prop_assert!(SegmentSet::from_bits(bits).is_none());
    }

    #[test]
    fn rope_scores_depend_only_on_relative_position(
        q in prop::collection::vec(-2.0f64..2.0, 8),
        k in prop::collection::vec(-2.0f64..2.0, 8),
        p in 0usize..50,
        p2 in 0usize..50,
        shift in 0usize..100,
    ) {
        let score = |pq: usize, pk: usize| {
            let mut tape = Tape::inference();
            let qv = tape.constant(Tensor::new(&[1, 8], q.clone()).unwrap());
            let kv = tape.constant(Tensor::new(&[1, 8], k.clone()).unwrap());
            let qr = tape.rope(qv, &[pq], 2, 10_000.0).unwrap();
            let kr = tape.rope(kv, &[pk], 2, 10_000.0).unwrap();
            let (a, b) = (tape.value(qr).data().to_vec(), tape.value(kr).data().to_vec());
            [0, 4].map(|h| (h..h + 4).map(|c| a[c] * b[c]).sum::<f64>())
        };
        let base = score(p, p2);
        let shifted = score(p + shift, p2 + shift);
        for h in 0..2 {
            prop_assert!((base[h] - shifted[h]).abs() < 1e-9);
        }
    }

    #[test]
    fn rope_preserves_norm(x in prop::collection::vec(-3.0f64..3.0, 8), pos in 0usize..500) {
        let mut tape = Tape::inference();
        let v = tape.constant(Tensor::new(&[1, 8], x.clone()).unwrap());
        let r = tape.rope(v, &[pos], 2, 10_000.0).unwrap();
        let n0: f64 = x.iter().map(|a| a * a).sum();
        let n1: f64 = tape.value(r).data().iter().map(|a| a * a).sum();
        prop_assert!((n0 - n1).abs() < 1e-9 * n0.max(1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut r = row.clone();
        softmax_in_place(&mut r, 0).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn contexts_have_the_requested_shape(seed in any::<u64>(), n_facts in 1usize..6, extra in 0usize..40) {
        let v = Vocab::default();
        let len = 2 * n_facts + extra;
        let ctx = gen_context(&v, seed, n_facts, len).unwrap();
        prop_assert_eq!(ctx.tokens.len(), len);
        prop_assert_eq!(ctx.facts.len(), n_facts);
        let mut keys: Vec<u32> = ctx.facts.iter().map(|f| f.key).collect();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), n_facts);
        for f in &ctx.facts {
            prop_assert!(ctx.tokens.windows(2).any(|w| w == [f.key, f.value]));
            prop_assert_eq!(ctx.tokens.iter().filter(|&&t| t == f.key).count(), 1);
        }
    }

    #[test]
    fn words_roundtrip_for_every_token(t in 0u32..93) {
        let v = Vocab::default();
        let word = v.detokenize(&[t]);
        prop_assert_eq!(v.parse_word(&word), Some(t));
    }

    #[test]
    fn artifact_cache_roundtrip(
        layers in 1usize..3,
        heads in 1usize..3,
        k in 1usize..4,
        start in 0usize..20,
        seed in any::<u64>(),
    ) {
        let hd = 2;
        let mut rng = lcc_core::RngState::new(seed);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..layers)
            .map(|_| {
                let n = k * heads * hd;
                ((0..n).map(|_| rng.normal()).collect(), (0..n).map(|_| rng.normal()).collect())
            })
            .collect();
        let cache = KvCache::from_rows(rows, (start..start + k).collect(), heads).unwrap();
        let exact = BufferArtifact::from_cache(Fingerprint([1; 32]), &cache, StorageDtype::F64, ArtifactMeta::default()).unwrap();
        prop_assert!(exact.to_cache().unwrap().bits_eq(&cache));
        prop_assert_eq!(exact.first_free_position, start + k);
        let rounded = BufferArtifact::from_cache(Fingerprint([1; 32]), &cache, StorageDtype::F32, ArtifactMeta::default()).unwrap();
        let again = BufferArtifact::from_cache(Fingerprint([1; 32]), &rounded.to_cache().unwrap(), StorageDtype::F32, ArtifactMeta::default()).unwrap();
        prop_assert_eq!(&rounded, &again);
        prop_assert!(rounded.to_cache().unwrap().max_abs_diff(&cache) < 1e-6 * 10.0);
    }
}
