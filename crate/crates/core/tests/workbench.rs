use sarlab::workbench::plot::{
    HEIGHT, MARGIN_BOTTOM, MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, WIDTH,
};
use sarlab::workbench::{
    batch_indices, chart_from_csv, line_chart, make_dataset, read_csv, Checkpoint, Container,
    ExperimentConfig, Family, Series, SyntheticDatasetSpec, Workspace,
};
use sarlab::Grid;

const TINY: &str = "\
run.seed = 3
dataset.side = 8
dataset.size = 24
dataset.classes = 2
tokenizer.schedule = 1,2
tokenizer.vocab = 8
tokenizer.latent_dim = 4
model.depth = 1
model.width = 8
model.heads = 2
train.batch = 4
eval.samples = 40
";

#[test]
fn sample_means_match_closed_form() {
    for family in [Family::Blobs, Family::Stripes, Family::Rings] {
        let spec = SyntheticDatasetSpec {
            family,
            classes: 2,
            side: 8,
            size: 10_000,
            seed: 4,
            ..Default::default()
        };
        let data = make_dataset::<f64>(&spec).unwrap();
        for c in 0..2 {
            let imgs: Vec<&Grid<f64>> = data
                .images
                .iter()
                .zip(&data.labels)
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect();
            let n = imgs.len() as f64;
            let want = spec.analytic_mean(c);
            let mut outside = 0;
            for k in 0..want.as_slice().len() {
                let vals: Vec<f64> = imgs.iter().map(|im| im.as_slice()[k]).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt().max(1e-12);
                let z = (mean - want.as_slice()[k]).abs() / se;
                assert!(z < 5.0, "{family:?} class {c} pixel {k}: z = {z}");
                if z > 3.0 {
                    outside += 1;
                }
            }
            assert!(
                outside <= 2,
                "{family:?} class {c}: {outside} pixels beyond 3 sigma"
            );
        }
    }
}

#[test]
fn dataset_items_are_independent_of_size() {
    let a = SyntheticDatasetSpec {
        size: 10,
        ..Default::default()
    };
    let b = SyntheticDatasetSpec {
        size: 30,
        ..Default::default()
    };
    let da = make_dataset::<f32>(&a).unwrap();
    let db = make_dataset::<f32>(&b).unwrap();
    assert_eq!(da.images[..], db.images[..10]);
    assert_eq!(da.labels, (0..10).map(|j| j % 4).collect::<Vec<_>>());
}

fn tiny_checkpoint() -> (Workspace<f32>, Checkpoint<f32>) {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let ws = Workspace::<f32>::prepare(&cfg).unwrap();
    let mut t = ws
        .trainer(ws.new_generator().unwrap(), cfg.train.clone())
        .unwrap();
    t.step(&ws.train[..4]).unwrap();
    t.step(&ws.train[4..8]).unwrap();
    let ck = ws.checkpoint(&t);
    (ws, ck)
}

#[test]
fn checkpoint_round_trips_exactly() {
    let (ws, ck) = tiny_checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);

    // A resumed trainer continues exactly like the original.
    let mut a = ws.resume(&ck, ws.config.train.clone()).unwrap();
    let mut b = ws.resume(&back, ws.config.train.clone()).unwrap();
    a.step(&ws.train[..4]).unwrap();
    b.step(&ws.train[..4]).unwrap();
    assert_eq!(a.generator().state(), b.generator().state());
    assert_eq!(a.steps_done(), 3);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (_, ck) = tiny_checkpoint();
    let bytes = ck.to_bytes();
    let kind = |b: &[u8]| Checkpoint::<f32>::from_bytes(b).unwrap_err().kind();
    assert_eq!(kind(&bytes[..bytes.len() - 1]), "integrity");
    assert_eq!(kind(&bytes[..bytes.len() / 3]), "integrity");
    let mut flipped = bytes.clone();
    let last = flipped.len() - 5;
    flipped[last] ^= 0x10;
    assert_eq!(kind(&flipped), "integrity");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert_eq!(kind(&magic), "integrity");
    let mut version = bytes.clone();
    version["SARLAB-CHECKPOINT ".len()] = b'2';
    assert_eq!(kind(&version), "integrity");
}

/// Reads the container with nothing but the documented layout.
#[test]
fn checkpoint_layout_by_hand() {
    let (_, ck) = tiny_checkpoint();
    let bytes = ck.to_bytes();
    let split = {
        let marker = b"\npayload ";
        let at = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .unwrap()
            + 1;
        at + bytes[at..].iter().position(|&b| b == b'\n').unwrap() + 1
    };
    let header = std::str::from_utf8(&bytes[..split]).unwrap();
    let payload = &bytes[split..];
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("SARLAB-CHECKPOINT 1"));
    let mut found = false;
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        match f[0] {
            "meta" => assert_eq!(f[2], "="),
            "tensor" if f[1] == "model.tok.start" => {
                assert_eq!(f[2], "8");
                let off: usize = f[3].parse().unwrap();
                assert_eq!(f[4], "32");
                let first = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
                assert_eq!(first, ck.state.tensor("tok.start").unwrap()[0]);
                found = true;
            }
            "tensor" => {}
            "payload" => {
                assert_eq!(f[1].parse::<usize>().unwrap(), payload.len());
                assert_eq!(f[2], "sha256");
                assert_eq!(f[3].len(), 64);
            }
            other => panic!("unexpected line kind {other}"),
        }
    }
    assert!(found);
    assert!(header.contains("meta step = 2\n"));
    assert!(header.contains("meta config.run.seed = 3\n"));
    let c = Container::from_bytes(&bytes).unwrap();
    assert_eq!(c.tensor("codebook").unwrap().shape, vec![8, 4]);
}

#[test]
fn svg_polyline_spans_the_plot_area() {
    let s = Series {
        name: "tf".into(),
        points: vec![(0.0, 1.0), (5.0, 2.0), (10.0, 3.0)],
    };
    let svg = line_chart("t", "step", "loss", &[s]);
    let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
    let pts = line
        .split("points=\"")
        .nth(1)
        .unwrap()
        .trim_end_matches("\"/>");
    let coords: Vec<(f64, f64)> = pts
        .split(' ')
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    assert_eq!(
        coords.first().unwrap(),
        &(MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM)
    );
    assert_eq!(coords.last().unwrap(), &(WIDTH - MARGIN_RIGHT, MARGIN_TOP));
    assert_eq!(coords[1].0, (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn charts_group_rows_by_scheme() {
    let csv = "scheme,step,loss\ntf,0,3\ntf,1,2\nsar,1,2.5\nsar,2,bad\n";
    let (_, rows) = read_csv(csv);
    assert_eq!(rows.len(), 3);
    let svg = chart_from_csv(csv, "loss", "loss");
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">sar</text>"));
}

#[test]
fn eval_rows_with_per_scale_lists_are_charted() {
    let csv = "scheme,step,fd,precision,recall,per_scale_fd,nfe\ntf,10,0.5,0.2,0.9,0;0.1;0.5,3\ntf,20,0.25,0.3,0.9,0;0.1;0.25,3\n";
    let (_, rows) = read_csv(csv);
    assert_eq!(rows.len(), 2);
    assert!(rows[0].values[3].is_nan());
    assert_eq!(rows[1].values[0], 0.25);
    assert_eq!(chart_from_csv(csv, "fd", "fd").matches("<polyline").count(), 1);
}

#[test]
fn config_rejects_mistakes_and_resolves_seeds() {
    assert_eq!(
        ExperimentConfig::parse("train.stepz = 1")
            .unwrap_err()
            .kind(),
        "config"
    );
    assert_eq!(
        ExperimentConfig::parse("train.steps = 1\ntrain.steps = 2")
            .unwrap_err()
            .kind(),
        "config"
    );
    assert_eq!(
        ExperimentConfig::parse("tokenizer.schedule = 1,3\ndataset.side = 16")
            .unwrap_err()
            .kind(),
        "config"
    );
    let c =
        ExperimentConfig::parse("# comment\nrun.seed = 9\n\ntrain.gamma = 1.0\nrefine.steps = 7\n")
            .unwrap();
    assert_eq!(
        (
            c.dataset.seed,
            c.eval_dataset_seed,
            c.train.seed,
            c.refine.seed
        ),
        (9, 10, 9, 9)
    );
    assert_eq!(c.refine.gamma, 1.0);
    assert_eq!(c.refine.steps, 7);
    assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
}

#[test]
fn batches_are_distinct_and_reproducible() {
    let a = batch_indices(50, 16, 1, 7);
    assert_eq!(a, batch_indices(50, 16, 1, 7));
    assert_ne!(a, batch_indices(50, 16, 1, 8));
    let mut s = a.clone();
    s.sort();
    s.dedup();
    assert_eq!(s.len(), 16);
    assert_eq!(batch_indices(5, 16, 0, 0).len(), 5);
}
