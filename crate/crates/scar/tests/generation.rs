mod common;

use std::cell::RefCell;
use std::time::Duration;

use virtue_core::retrieval::NegativeType;
use virtue_scar::client::{parse_reply, strip_fences};
use virtue_scar::{
    filter_sample, generate_candidates, CocoAnnotation, CocoRecord, GeneratorClient, MockClient, Result, RetryPolicy,
    RuleExtractor, ScarError,
};

fn record(caption: Option<&str>, category: &str) -> CocoRecord {
    CocoRecord {
        dataset: "refcoco+".into(),
        image_id: "1".into(),
        file_name: "1.jpg".into(),
        width: 640,
        height: 427,
        annotations: vec![CocoAnnotation {
            id: "1".into(),
            category: category.into(),
            bbox: [10.0, 10.0, 100.0, 100.0],
            caption: caption.map(str::to_string),
            segmentation: None,
        }],
    }
}

fn prompt(caption: Option<&str>, category: &str) -> String {
    let r = record(caption, category);
    virtue_scar::build_prompt(&r, &r.annotations[0])
}

#[test]
fn mock_on_motorcycle_keeps_the_ground_truth() {
    let p = prompt(Some("Motorcycle in forefront fully shown."), "motorcycle");
    let c = generate_candidates(&MockClient::new(3), &p, &RetryPolicy::immediate()).unwrap();
    assert_eq!(c.ground_truth, "Motorcycle in forefront fully shown.");
    assert_eq!(c.negatives.len(), 9);
    for kind in NegativeType::ALL {
        assert_eq!(c.negatives.iter().filter(|n| n.kind == kind).count(), 3);
    }
    let again = generate_candidates(&MockClient::new(3), &p, &RetryPolicy::immediate()).unwrap();
    assert_eq!(c, again);
}

#[test]
fn mock_candidates_pass_the_filters() {
    let lex = common::lexicon();
    let cases = [
        (Some("Motorcycle in forefront fully shown."), "motorcycle"),
        (Some("The bench closest to the palm tree and on a concrete pedestal at the beach."), "bench"),
        (Some("Cat sitting in front of a computer screen."), "cat"),
        (Some("Fan standing near the chairs in a glass-roofed lounge."), "fan"),
        (Some("woman holding an umbrella"), "person"),
        (None, "dog"),
        (None, "traffic light"),
    ];
    for seed in 0..5 {
        for (caption, category) in cases {
            let c = MockClient::new(seed).candidates(caption.unwrap_or(category), category);
            let mut s = common::sample("mock", &c.ground_truth, &[]);
            s.negatives = c.negatives.clone();
            s.validate().unwrap();
            let r = filter_sample(&s, &RuleExtractor, &lex).unwrap();
            assert!(r.passed(), "seed {seed} {caption:?}: {:?}\n{:#?}", r.violations, c);
        }
    }
}

#[test]
fn fenced_replies_are_read() {
    let mut mock = MockClient::new(0);
    mock.fenced = true;
    let reply = mock.complete(&prompt(None, "dog")).unwrap();
    assert!(reply.starts_with("```"));
    assert_eq!(parse_reply(&reply).unwrap().negatives.len(), 9);
    assert_eq!(strip_fences("```\n[]\n```"), "[]");
}

struct Scripted {
    replies: RefCell<Vec<Result<String>>>,
    calls: RefCell<usize>,
}

impl Scripted {
    fn new(replies: Vec<Result<String>>) -> Scripted {
        Scripted { replies: RefCell::new(replies), calls: RefCell::new(0) }
    }
}

impl GeneratorClient for Scripted {
    fn complete(&self, _: &str) -> Result<String> {
        *self.calls.borrow_mut() += 1;
        let mut r = self.replies.borrow_mut();
        if r.is_empty() {
            Err(ScarError::Client("no more replies".into()))
        } else {
            r.remove(0)
        }
    }
}

fn eight_negative_reply() -> String {
    let c = MockClient::new(0).candidates("dog", "dog");
    let mut v = serde_json::to_value(&c).unwrap();
    v["negatives"].as_array_mut().unwrap().pop();
    v.to_string()
}

#[test]
fn eight_negatives_is_a_generation_error_after_three_attempts() {
    let client = Scripted::new(vec![Ok(eight_negative_reply()), Ok(eight_negative_reply()), Ok(eight_negative_reply())]);
    let err = generate_candidates(&client, "category: dog", &RetryPolicy::immediate()).unwrap_err();
    assert!(matches!(err, ScarError::Generation { attempts: 3, .. }), "{err}");
    assert!(err.to_string().contains("8 negatives"), "{err}");
    assert_eq!(*client.calls.borrow(), 3);
}

#[test]
fn non_json_reply_is_retried_then_succeeds() {
    let good = MockClient::new(0).complete("category: dog").unwrap();
    let client = Scripted::new(vec![Ok("Sure! Here you go.".into()), Ok(good)]);
    let c = generate_candidates(&client, "category: dog", &RetryPolicy::immediate()).unwrap();
    assert_eq!(c.negatives.len(), 9);
    assert_eq!(*client.calls.borrow(), 2);
}

#[test]
fn backoff_doubles() {
    let client = Scripted::new(vec![]);
    let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(20) };
    let t = std::time::Instant::now();
    assert!(generate_candidates(&client, "", &policy).is_err());
    assert!(t.elapsed() >= Duration::from_millis(60), "{:?}", t.elapsed());
}
