mod common;

use common::*;
use partial_ner::corpus::{
    bilou_to_bio, bio_to_bilou, labels_to_spans, parse_conll, spans_to_labels, write_conll, BioRepair, Dataset,
    Scheme, Tagset,
};
use partial_ner::model::Model;
use partial_ner::rng;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spans_labels_round_trip(seed in any::<u64>(), n in 1usize..20) {
        let mut g = rng::seeded(seed);
        let types = vec!["Gene".to_string(), "Disease".to_string()];
        let spans = random_spans(&mut g, n, &types);
        for scheme in [Scheme::Bio, Scheme::Bilou] {
            let labels = spans_to_labels(&spans, n, scheme).unwrap();
            prop_assert_eq!(&labels_to_spans(&labels, scheme).unwrap(), &spans);
        }
        let bio = spans_to_labels(&spans, n, Scheme::Bio).unwrap();
        let bilou = bio_to_bilou(&bio, BioRepair::Error).unwrap();
        prop_assert_eq!(&bilou, &spans_to_labels(&spans, n, Scheme::Bilou).unwrap());
        prop_assert_eq!(bilou_to_bio(&bilou).unwrap(), bio);
    }

    #[test]
    fn conll_round_trip(seed in any::<u64>(), sentences in 1usize..8, p_unknown in 0.0f64..0.5) {
        let mut g = rng::seeded(seed);
        let tagset = Tagset::new(Scheme::Bilou, ["Gene", "Disease"]).unwrap();
        let ds = Dataset::new(
            (0..sentences)
                .map(|_| {
                    let n = 1 + rng::below(&mut g, 9);
                    random_partial_sentence(&mut g, &tagset, n, p_unknown)
                })
                .collect(),
            tagset.clone(),
        );
        let text = write_conll(&ds, "-");
        let back = parse_conll(&text, &tagset, "-").unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(write_conll(&back, "-"), text);
    }
}

#[test]
fn model_file_round_trip() {
    let mut g = rng::seeded(5);
    let (model, _) = random_problem(&mut g, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Model::read_from(bytes.as_slice()).is_err());
}
