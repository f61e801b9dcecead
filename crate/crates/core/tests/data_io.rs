use std::fs;
use std::process::Command;

use proptest::prelude::*;

use qmlp::autograd::Tape;
use qmlp::data::idx::encode_idx;
use qmlp::data::{
    load_idx, parse_config, read_report, synth_dataset, synth_patterns, write_report, Cell, Dataset, Report, ReportFormat,
};
use qmlp::pipeline::argmax;
use qmlp::{Error, Tensor};

fn mnist_like(n: usize) -> Dataset {
    let data: Vec<f64> = (0..n * 28 * 28).map(|i| ((i * 31) % 256) as f64 / 255.0).collect();
    let labels = (0..n).map(|i| (i * 7) % 10).collect();
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels, 10).unwrap()
}

#[test]
fn idx_files_load_with_mnist_shape() {
    let dir = tempfile::tempdir().unwrap();
    let ds = mnist_like(30);
    let (img, lab) = encode_idx(&ds).unwrap();
    let (ip, lp) = (dir.path().join("imgs"), dir.path().join("labs"));
    fs::write(&ip, &img).unwrap();
    fs::write(&lp, &lab).unwrap();
    let back = load_idx(&ip, &lp).unwrap();
    assert_eq!(back.len(), 30);
    assert_eq!(back.image_shape(), [1, 28, 28]);
    assert_eq!(back.classes(), 10);
    assert_eq!(back, ds);

    fs::write(&ip, &img[..img.len() - 3]).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(e) if matches!(e.root(), Error::Format(_))));
    assert!(matches!(load_idx(&dir.path().join("absent"), &lp), Err(e) if matches!(e.root(), Error::Io { .. })));
}

#[test]
fn cli_trains_on_idx_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, n) in [("train", 40), ("test", 20)] {
        let (img, lab) = encode_idx(&mnist_like(n)).unwrap();
        fs::write(d.join(format!("{name}-img")), img).unwrap();
        fs::write(d.join(format!("{name}-lab")), lab).unwrap();
    }
    let cfg = "\
[model]
family = mixer
depth = 1
height = 28
width = 28
patch = 7
channels = 8
channel_hidden = 16
token_hidden = 8
groups = 2
[train]
epochs = 1
[data]
source = idx
train_images = train-img
train_labels = train-lab
test_images = test-img
test_labels = test-lab
[output]
dir = out
";
    fs::write(d.join("mnist.cfg"), cfg).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qmlp"))
        .current_dir(d)
        .args(["train", "--config", "mnist.cfg"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read_report(&d.join("out/train_metrics.csv")).unwrap();
    assert_eq!(metrics.rows.len(), 1);
}

#[test]
fn linear_probe_separates_noiseless_patterns() {
    let pats = synth_patterns(10, 8, 8).unwrap();
    let x = pats.images().reshape(&[10, 64]).unwrap();
    let mut w = Tensor::zeros(&[10, 64]);
    let mut b = Tensor::zeros(&[10]);
    for _ in 0..300 {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let z = t.linear(xv, wv, Some(bv)).unwrap();
        let l = t.cross_entropy(z, pats.labels()).unwrap();
        let g = t.backward(l).unwrap();
        w = w.zip_map(&g.get(wv), |a, d| a - 0.5 * d).unwrap();
        b = b.zip_map(&g.get(bv), |a, d| a - 0.5 * d).unwrap();
    }
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
    let z = t.linear(xv, wv, Some(bv)).unwrap();
    let logits = t.value(z);
    for (i, row) in logits.data().chunks(10).enumerate() {
        assert_eq!(argmax(row), pats.labels()[i]);
    }
}

#[test]
fn synthetic_set_is_reproducible() {
    assert_eq!(synth_dataset(5, 100, 10, 8, 8).unwrap(), synth_dataset(5, 100, 10, 8, 8).unwrap());
}

#[test]
fn config_examples() {
    let empty = parse_config("").unwrap();
    assert_eq!(empty, qmlp::data::RunConfig::default());
    let four = parse_config("[quant]\nweight_bits = 4\n").unwrap();
    assert_eq!(four.quant.weight_bits, 4);
    assert_eq!(four.model, empty.model);
    match parse_config("# comment\n[quant]\nweight_bits = banana\n") {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains("quant.weight_bits"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    let cfg = parse_config(&four.render()).unwrap();
    assert_eq!(cfg, four);
}

fn cell() -> impl Strategy<Value = Cell> {
    prop_oneof![
        any::<i32>().prop_map(|i| Cell::Int(i as i64)),
        (-1e6f64..1e6).prop_map(Cell::Float),
        "[a-z ,\"]{1,8}".prop_filter("not numeric", |s| s.trim().parse::<f64>().is_err()).prop_map(Cell::Text),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reports_round_trip(rows in prop::collection::vec(prop::collection::vec(cell(), 3), 0..6), json in any::<bool>()) {
        let mut r = Report::new(&["a", "b c", "d,e"]);
        for row in rows {
            r.push(row).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let (fmt, name) = if json { (ReportFormat::Json, "r.json") } else { (ReportFormat::Csv, "r.csv") };
        let path = dir.path().join(name);
        write_report(&r, &path, fmt).unwrap();
        let back = read_report(&path).unwrap();
        prop_assert_eq!(&back, &r);
        write_report(&back, &path, fmt).unwrap();
        prop_assert_eq!(read_report(&path).unwrap(), r);
    }
}
