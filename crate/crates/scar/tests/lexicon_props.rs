mod common;

use proptest::prelude::*;
use virtue_scar::{Lexicon, ScarError};

const PHRASES: [&str; 18] = [
    "traffic light", "Stoplight", "the traffic signal", "light", "motorcycle", "motorbikes", "bicycle", "bike",
    "scooter", "horse", "salad fork", "fork", "wine glass", "glass", "girl", "woman", "garage", "kiosk",
];

#[test]
fn spec_swaps() {
    let lex = common::lexicon();
    assert!(lex.related("traffic light", "stoplight"));
    assert!(!lex.related("salad fork", "wine glass"));
    assert!(!lex.related("salad fork", "butter knife"));
    assert!(lex.related("salad fork", "fork"));
    assert!(lex.related("girl", "woman"));
    assert!(lex.related("zoo", "menagerie"));
    assert!(!lex.related("motorcycle", "bicycle"));
    assert!(lex.related("kiosk", "kiosk"));
}

#[test]
fn missing_lexicon_is_a_configuration_error() {
    let err = Lexicon::load(std::path::Path::new("/nonexistent/data.noun")).unwrap_err();
    assert!(matches!(err, ScarError::Config(_)), "{err}");
}

proptest! {
    #[test]
    fn relatedness_is_symmetric(a in 0..PHRASES.len(), b in 0..PHRASES.len(), x in "[a-z]{1,6}( [a-z]{1,6})?") {
        let lex = common::lexicon();
        prop_assert_eq!(lex.related(PHRASES[a], PHRASES[b]), lex.related(PHRASES[b], PHRASES[a]));
        prop_assert_eq!(lex.related(PHRASES[a], &x), lex.related(&x, PHRASES[a]));
        prop_assert!(lex.related(&x, &x));
    }
}
