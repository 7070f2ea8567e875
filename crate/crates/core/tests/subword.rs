use mlmass::subword::{lang_tag, minimum_size, train_vocab, NUM_RESERVED};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,6}"
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..8).prop_map(|w| w.join(" "))
}

fn corpus() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(sentence(), 1..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn training_is_deterministic(texts in corpus(), extra in 0usize..60) {
        let langs = vec!["xa".to_string()];
        let size = minimum_size(texts.iter().map(String::as_str), 1) + extra;
        let a = train_vocab(texts.iter().map(String::as_str), size, &langs).unwrap();
        let b = train_vocab(texts.iter().map(String::as_str), size, &langs).unwrap();
        prop_assert_eq!(a.merges(), b.merges());
        prop_assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn training_sentences_round_trip(texts in corpus(), extra in 0usize..60) {
        let size = minimum_size(texts.iter().map(String::as_str), 0) + extra;
        let v = train_vocab(texts.iter().map(String::as_str), size, &[]).unwrap();
        for s in &texts {
            let ids = v.encode(s);
            prop_assert!(ids.iter().all(|&id| !v.is_special(id)));
            prop_assert_eq!(&v.decode(&ids).unwrap(), s);
        }
    }

    #[test]
    fn reserved_and_tag_ids_ignore_corpus(
        a in corpus(),
        b in corpus(),
        langs in prop::collection::btree_set("[a-z]{2,3}", 1..5),
    ) {
        let langs: Vec<String> = langs.into_iter().collect();
        let mut shuffled = langs.clone();
        shuffled.reverse();
        let size = |t: &[String]| minimum_size(t.iter().map(String::as_str), langs.len());
        let va = train_vocab(a.iter().map(String::as_str), size(&a), &langs).unwrap();
        let vb = train_vocab(b.iter().map(String::as_str), size(&b) + 20, &shuffled).unwrap();
        let head = NUM_RESERVED + langs.len();
        prop_assert_eq!(&va.pieces()[..head], &vb.pieces()[..head]);
        for (i, l) in langs.iter().enumerate() {
            prop_assert_eq!(va.tag_id(l), Some((NUM_RESERVED + i) as u32));
            let tag = lang_tag(l);
            prop_assert_eq!(va.piece((NUM_RESERVED + i) as u32), Some(tag.as_str()));
        }
    }
}
