use proptest::prelude::*;
use seqhtr::attention::{chunkwise_row, content_weights, monotonic_row, penalized_weights};
use seqhtr::data::{augment, dilate3x3, erode3x3, synth_line, FontSpec, GrayImage};
use seqhtr::layers::sequence_mask;
use seqhtr::metrics::levenshtein;
use seqhtr::tensor::{Graph, Tensor};
use seqhtr::Alphabet;

fn short_text() -> impl Strategy<Value = String> {
    "[abc ]{0,8}"
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(a in short_text(), b in short_text(), c in short_text()) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        let (la, lb) = (a.chars().count(), b.chars().count());
        prop_assert!(levenshtein(&a, &b) >= la.abs_diff(lb));
        prop_assert!(levenshtein(&a, &b) <= la.max(lb));
    }

    #[test]
    fn alphabet_round_trips(text in "[a-e .]{0,20}") {
        let alphabet = Alphabet::new("abcde .".chars()).unwrap();
        let ids = alphabet.encode(&text).unwrap();
        prop_assert!(ids.iter().all(|&i| i < alphabet.len()));
        prop_assert_eq!(alphabet.decode(&ids), text.clone());
        let target = alphabet.encode_target(&text).unwrap();
        prop_assert_eq!(target.first(), Some(&alphabet.sos_id()));
        prop_assert_eq!(target.last(), Some(&alphabet.eos_id()));
        prop_assert_eq!(target.len(), ids.len() + 2);
    }

    #[test]
    fn chunkwise_preserves_mass(
        p in prop::collection::vec(0.0f64..1.0, 1..10),
        u in prop::collection::vec(-5.0f64..5.0, 10),
        w in 1usize..4,
    ) {
        let m = p.len();
        let mut prev = vec![0.0; m];
        prev[0] = 1.0;
        let alpha = monotonic_row(&p, &prev);
        let beta = chunkwise_row(&alpha, &u[..m], m, w);
        let sa: f64 = alpha.iter().sum();
        let sb: f64 = beta.iter().sum();
        prop_assert!((sa - sb).abs() < 1e-9);
        prop_assert!(beta.iter().all(|&b| b >= 0.0));
        if w == 1 {
            for (x, y) in alpha.iter().zip(&beta) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monotonic_mass_never_exceeds_previous(
        p in prop::collection::vec(0.0f64..1.0, 1..10),
        raw in prop::collection::vec(0.0f64..1.0, 10),
    ) {
        let m = p.len();
        let total: f64 = raw[..m].iter().sum::<f64>().max(1e-9);
        let prev: Vec<f64> = raw[..m].iter().map(|v| v / total).collect();
        let alpha = monotonic_row(&p, &prev);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!(alpha.iter().sum::<f64>() <= prev.iter().sum::<f64>() + 1e-12);
    }

    #[test]
    fn masked_softmax_weights_are_distributions(
        lengths in prop::collection::vec(1usize..7, 1..4),
        energies in prop::collection::vec(-20.0f64..20.0, 24),
    ) {
        let m = *lengths.iter().max().unwrap();
        let b = lengths.len();
        let mask = sequence_mask(&lengths, m);
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![b, m], energies[..b * m].to_vec()).unwrap());
        let w = content_weights(&mut g, e, &mask).unwrap();
        let (pw, _) = penalized_weights(&mut g, e, None, &mask).unwrap();
        for v in [w, pw] {
            for (r, row) in g.value(v).data().chunks(m).enumerate() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &x) in row.iter().enumerate() {
                    if j >= lengths[r] {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn erosion_never_exceeds_dilation(vals in prop::collection::vec(0.0f64..1.0, 30)) {
        let img = GrayImage::new(5, 6, vals).unwrap();
        let d = dilate3x3(&img);
        let e = erode3x3(&img);
        for i in 0..30 {
            prop_assert!(e.data[i] <= img.data[i] + 1e-15);
            prop_assert!(img.data[i] <= d.data[i] + 1e-15);
        }
        prop_assert_eq!(erode3x3(&d).data.len(), 30);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_keeps_label_and_height(seed in any::<u64>(), text in "[a-z]{1,6}") {
        let sample = synth_line(&text, &FontSpec::default(), seed).unwrap();
        let out = augment(&sample, seed ^ 7);
        prop_assert_eq!(&out.transcript, &sample.transcript);
        prop_assert_eq!(out.image.height, sample.image.height);
        prop_assert_eq!(out.image.width, sample.image.width);
        prop_assert!(out.image.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn seeded_augmentation_is_reproducible() {
    let sample = synth_line("abc", &FontSpec::default(), 1).unwrap();
    assert_eq!(augment(&sample, 9).image, augment(&sample, 9).image);
}
