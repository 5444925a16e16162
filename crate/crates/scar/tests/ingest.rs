use std::io::Write;
use std::path::Path;

use virtue_scar::{ingest, CocoRecord, Format, IngestOptions, ScarError};

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn collect(path: &Path, format: Format) -> Vec<CocoRecord> {
    ingest(path, format, &IngestOptions::new("coco")).unwrap().map(Result::unwrap).collect()
}

const COCO: &str = r#"{
  "images": [
    {"id": 1, "file_name": "a.jpg", "width": 640, "height": 427},
    {"id": 2, "file_name": "b.jpg", "width": 100, "height": 100}
  ],
  "categories": [{"id": 7, "name": "food"}, {"id": 8, "name": "cat"}],
  "annotations": [
    {"id": 10, "image_id": 1, "category_id": 7, "bbox": [135.57, 248.43, 22.32, 29.79]},
    {"id": 11, "image_id": 1, "category_id": 8, "bbox": [0, 0, 50, 50]},
    {"id": 12, "image_id": 2, "category_id": 8, "bbox": [10, 10, 20, 20]},
    {"image_id": 2, "caption": "A cat on a sofa."}
  ]
}"#;

#[test]
fn coco_fixture_gives_two_records_three_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let recs = collect(&write(dir.path(), "coco.json", COCO), Format::Coco);
    assert_eq!(recs.len(), 2);
    assert_eq!(recs.iter().map(|r| r.annotations.len()).sum::<usize>(), 3);
    assert_eq!(recs[0].annotations[0].category, "food");
    assert_eq!(recs[1].annotations[0].caption.as_deref(), Some("A cat on a sofa."));
}

#[test]
fn out_of_bounds_boxes_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let text = COCO.replace("[10, 10, 20, 20]", "[90, 90, 20, 20]");
    let path = write(dir.path(), "coco.json", &text);
    let mut stream = ingest(&path, Format::Coco, &IngestOptions::new("coco")).unwrap();
    let recs: Vec<CocoRecord> = stream.by_ref().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 1);
    let skipped = stream.skipped();
    assert!(skipped.iter().any(|s| s.annotation_id.as_deref() == Some("12")), "{skipped:?}");
}

#[test]
fn refcoco_yields_one_annotation_per_expression() {
    let dir = tempfile::tempdir().unwrap();
    let text = COCO.replacen(
        "\"annotations\"",
        r#""refs": [{"ref_id": 5, "ann_id": 11, "sentences": [{"sent": "cat on the left"}, {"sent": "left cat"}]}],
  "annotations""#,
        1,
    );
    let recs = collect(&write(dir.path(), "refs.json", &text), Format::RefCoco);
    let anns: Vec<_> = recs.iter().flat_map(|r| r.annotations.iter()).collect();
    assert_eq!(anns.len(), 2);
    assert_eq!(anns[0].id, "5-0");
    assert_eq!(anns[1].caption.as_deref(), Some("left cat"));
}

#[test]
fn ade_lines_stream() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"image_id": "x1", "file_name": "x1.jpg", "width": 64, "height": 64, "objects": [{"id": 1, "name": "fan", "bbox": [1, 2, 3, 4]}]}
{"image_id": "x2", "file_name": "x2.jpg", "width": 64, "height": 64, "objects": [{"id": 2, "name": "lamp", "bbox": [5, 6, 7, 8]}]}
"#;
    let recs = collect(&write(dir.path(), "ade.jsonl", text), Format::Ade20k);
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].annotations[0].category, "lamp");
}

#[test]
fn malformed_json_reports_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"image_id": "x1", "file_name": "x1.jpg", "width": 64, "height": 64, "objects": []}"#;
    let text = format!("{good}\n{{\"image_id\": \"x2\", \"width\": oops}}\n");
    let path = write(dir.path(), "bad.jsonl", &text);
    let err = ingest(&path, Format::Ade20k, &IngestOptions::new("ade20k"))
        .unwrap()
        .find_map(Result::err)
        .unwrap();
    let ScarError::Parse { offset, .. } = err else { panic!("{err}") };
    let at = text.find("oops").unwrap() as u64;
    assert!(offset >= at && offset <= at + 4, "offset {offset}, error near {at}");

    let coco = COCO.replace("\"width\": 100", "\"width\": ,");
    let path = write(dir.path(), "bad.json", &coco);
    let err = ingest(&path, Format::Coco, &IngestOptions::new("coco")).err().unwrap();
    let ScarError::Parse { offset, .. } = err else { panic!("{err}") };
    let at = coco.find("\"width\": ,").unwrap() as u64 + 9;
    assert!(offset.abs_diff(at) <= 1, "offset {offset}, error at {at}");
}

#[test]
fn visual_genome_stream_keeps_memory_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vg.json");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    let n = 100_000;
    f.write_all(b"[").unwrap();
    for i in 0..n {
        if i > 0 {
            f.write_all(b",").unwrap();
        }
        write!(
            f,
            r#"{{"image_id": {i}, "width": 800, "height": 600, "objects": [{{"object_id": {i}, "x": 10, "y": 20, "w": 30, "h": 40, "names": ["tree"]}}]}}"#
        )
        .unwrap();
    }
    f.write_all(b"]").unwrap();
    drop(f);
    let opts = IngestOptions { dataset: "vg".into(), window: 16 };
    let mut stream = ingest(&path, Format::VisualGenome, &opts).unwrap();
    let mut count = 0;
    for rec in stream.by_ref() {
        let rec = rec.unwrap();
        assert_eq!(rec.annotations[0].category, "tree");
        count += 1;
    }
    assert_eq!(count, n);
    let peak = stream.peak_resident();
    assert!((1..=16).contains(&peak), "peak {peak}");
}

#[test]
fn unknown_format_is_rejected() {
    assert!("csv".parse::<Format>().is_err());
    assert_eq!("vg".parse::<Format>().unwrap(), Format::VisualGenome);
}
