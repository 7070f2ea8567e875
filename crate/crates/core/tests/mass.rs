use mlmass::mass::{build_mass_example, sample_span, Corruption, MaskSpec};
use mlmass::subword::{BOS, EOS, MASK};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TAG: u32 = 9;
const RANDOM: std::ops::Range<u32> = 20..500;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn corruption_only_touches_the_encoder(
        tokens in prop::collection::vec(20u32..500, 2..40),
        ratio in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let spec = MaskSpec { fragment_ratio: ratio, ..MaskSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = build_mass_example(&tokens, TAG, &spec, RANDOM, &mut rng).unwrap();
        let (u, k) = (ex.start, ex.len);
        let e = &ex.example;

        prop_assert_eq!(k, ((ratio * tokens.len() as f64).round() as usize).max(1));
        prop_assert!(u + k <= tokens.len());
        prop_assert_eq!(&e.target[..], &tokens[u..u + k]);
        prop_assert_eq!(e.loss_mask.len(), k);
        prop_assert!(e.loss_mask.iter().all(|&m| m == 1));
        prop_assert_eq!(e.dec_in[0], BOS);
        prop_assert_eq!(&e.dec_in[1..], &tokens[u..u + k - 1]);

        prop_assert_eq!(e.enc_ids.len(), tokens.len() + 2);
        prop_assert_eq!(e.enc_ids[0], TAG);
        prop_assert_eq!(*e.enc_ids.last().unwrap(), EOS);
        for (i, &t) in tokens.iter().enumerate() {
            let enc = e.enc_ids[1 + i];
            if i < u || i >= u + k {
                prop_assert_eq!(enc, t);
            } else {
                match ex.corruption[i - u] {
                    Corruption::Masked => prop_assert_eq!(enc, MASK),
                    Corruption::Random => prop_assert!(RANDOM.contains(&enc)),
                    Corruption::Kept => prop_assert_eq!(enc, t),
                }
            }
        }
    }

    #[test]
    fn span_fits_and_respects_min_len(m in 0usize..50, min_len in 1usize..6, seed in any::<u64>()) {
        let spec = MaskSpec { min_len, ..MaskSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_span(m, &spec, &mut rng) {
            Ok((u, k)) => {
                prop_assert!(m >= min_len && k >= 1 && u + k <= m);
            }
            Err(_) => prop_assert!(m < min_len || m == 0),
        }
    }
}
