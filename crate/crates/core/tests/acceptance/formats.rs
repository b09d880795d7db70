use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use maxl::autograd::Tensor;
use maxl::data::{load_cifar, load_idx, CifarVariant, Split};
use maxl::hierarchy::Hierarchy;
use maxl::nn::{Architecture, Checkpoint, InputShape, LabelGenNet, MultiTaskNet};
use maxl::Error;

use crate::{ensure, Outcome};

const MNIST_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist10k");

fn train_cli(config: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_maxl"))
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "train {} failed: {}",
        config.display(),
        String::from_utf8_lossy(&status.stderr)
    );
    fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())
}

pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs = [
        ("synthetic-maxl", "dataset = synthetic\nmethod = maxl\nepochs = 3\nseed = 11\n".to_string()),
        ("synthetic-single", "dataset = synthetic\nmethod = single\nepochs = 3\nseed = 4\n".to_string()),
        ("synthetic-random", "dataset = synthetic\nmethod = random\nepochs = 3\n".to_string()),
        ("synthetic-kmeans", "dataset = synthetic\nmethod = kmeans\nepochs = 2\nseed = 2\n".to_string()),
        (
            "mnist-maxl",
            format!("dataset = mnist\ndata-dir = {MNIST_DIR}\ntrain-subset = 300\ntest-subset = 100\nepochs = 1\nprobe-size = 64\n"),
        ),
    ];
    for (name, text) in &configs {
        let cfg = tmp.path().join(format!("{name}.cfg"));
        fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let first = train_cli(&cfg, &tmp.path().join(format!("{name}-a")))?;
        let second = train_cli(&cfg, &tmp.path().join(format!("{name}-b")))?;
        ensure!(first.len() > 100, "{name}: metrics.csv has only {} bytes", first.len());
        ensure!(first == second, "{name}: metrics.csv differs between identical runs");
    }
    Ok(format!(
        "{} configurations, each trained twice with byte-identical metrics.csv",
        configs.len()
    ))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn checkpoint_round_trip(dir: &Path) -> Result<usize, String> {
    let arch = Architecture::Mlp { hidden: vec![7, 5] };
    let input = InputShape::flat(6);
    let mut net = MultiTaskNet::new(&arch, input, 3, 6, 1).map_err(|e| e.to_string())?;
    let gen = LabelGenNet::new(&arch, input, Hierarchy::balanced(3, 2).unwrap(), 2).map_err(|e| e.to_string())?;
    // Values whose bit patterns a lossy encoding would change.
    let special = [
        -0.0,
        f64::MIN_POSITIVE / 3.0,
        f64::MAX,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::from_bits(0x7ff8_dead_beef_0001),
        1.0 / 3.0,
    ];
    let w = net.params_mut().get_mut("trunk.fc0.weight").unwrap();
    w.data_mut()[..special.len()].copy_from_slice(&special);

    let mut ckpt = Checkpoint::new("kind=acceptance\nepoch=3");
    ckpt.push_params("net.", net.params());
    ckpt.push_params("gen.", gen.params());
    let path = dir.join("round-trip.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure!(back.descriptor == ckpt.descriptor, "descriptor changed");
    ensure!(back.tensors.len() == ckpt.tensors.len(), "tensor count changed");
    for ((na, ta), (nb, tb)) in ckpt.tensors.iter().zip(&back.tensors) {
        ensure!(
            na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb),
            "tensor `{na}` changed"
        );
    }
    ensure!(
        back.to_bytes() == fs::read(&path).unwrap(),
        "re-encoding changed the file"
    );

    let mut restored = MultiTaskNet::new(&arch, input, 3, 6, 99).map_err(|e| e.to_string())?;
    back.load_params("net.", restored.params_mut())
        .map_err(|e| e.to_string())?;
    for (a, b) in net.params().values().iter().zip(restored.params().values()) {
        ensure!(bits(a) == bits(b), "loaded parameters differ");
    }
    Ok(ckpt.tensors.len())
}

fn training_checkpoints(dir: &Path) -> Result<usize, String> {
    let cfg = dir.join("ckpt.cfg");
    fs::write(&cfg, "dataset = synthetic\nepochs = 2\ncheckpoint-every = 1\n").unwrap();
    let out = dir.join("ckpt-run");
    train_cli(&cfg, &out)?;
    let mut n = 0;
    for entry in fs::read_dir(out.join("checkpoints")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let bytes = fs::read(&path).unwrap();
        let ckpt = Checkpoint::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(
            ckpt.to_bytes() == bytes,
            "{} does not re-encode identically",
            path.display()
        );
        n += 1;
    }
    ensure!(n > 0, "training wrote no checkpoints");
    Ok(n)
}

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

fn idx_images(n: u32, rows: u32, cols: u32, payload: usize) -> Vec<u8> {
    let mut b = [be(0x803), be(n), be(rows), be(cols)].concat();
    b.resize(16 + payload, 7);
    b
}

fn idx_labels(n: u32, payload: &[u8]) -> Vec<u8> {
    let mut b = [be(0x801), be(n)].concat();
    b.extend_from_slice(payload);
    b
}

type Expect = fn(&Error) -> bool;

fn bad_magic(e: &Error) -> bool {
    matches!(e, Error::BadMagic { .. })
}

fn truncated(e: &Error) -> bool {
    matches!(e, Error::Truncated { .. })
}

fn format_error(e: &Error) -> bool {
    matches!(e, Error::Format { .. })
}

fn count_mismatch(e: &Error) -> bool {
    matches!(e, Error::CountMismatch(_))
}

fn malformed_idx(dir: &Path) -> Result<usize, String> {
    let good_images = idx_images(2, 2, 2, 8);
    let good_labels = idx_labels(2, &[1, 9]);
    let mut wrong_endian = good_images.clone();
    wrong_endian[..4].copy_from_slice(&0x803u32.to_le_bytes());
    let mut trailing = good_images.clone();
    trailing.push(0);
    let cases: [(&str, Vec<u8>, Vec<u8>, Expect); 10] = [
        (
            "images magic of a label file",
            idx_labels(2, &[0; 8]),
            good_labels.clone(),
            bad_magic,
        ),
        (
            "label magic of an image file",
            good_images.clone(),
            idx_images(2, 2, 2, 8),
            bad_magic,
        ),
        ("little-endian magic", wrong_endian, good_labels.clone(), bad_magic),
        (
            "header cut short",
            good_images[..11].to_vec(),
            good_labels.clone(),
            truncated,
        ),
        ("empty image file", Vec::new(), good_labels.clone(), truncated),
        (
            "pixels cut short",
            idx_images(2, 2, 2, 7),
            good_labels.clone(),
            truncated,
        ),
        ("trailing pixel bytes", trailing, good_labels.clone(), format_error),
        (
            "labels cut short",
            good_images.clone(),
            idx_labels(3, &[1, 2]),
            truncated,
        ),
        (
            "label count differs",
            good_images.clone(),
            idx_labels(3, &[1, 2, 3]),
            count_mismatch,
        ),
        (
            "label out of range",
            good_images.clone(),
            idx_labels(2, &[1, 10]),
            format_error,
        ),
    ];
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    fs::write(&images, &good_images).unwrap();
    fs::write(&labels, &good_labels).unwrap();
    load_idx(&images, &labels).map_err(|e| format!("well-formed IDX pair rejected: {e}"))?;
    for (name, img, lbl, expect) in &cases {
        fs::write(&images, img).unwrap();
        fs::write(&labels, lbl).unwrap();
        match load_idx(&images, &labels) {
            Ok(_) => return Err(format!("IDX `{name}` was accepted")),
            Err(e) if expect(&e) => {}
            Err(e) => return Err(format!("IDX `{name}` gave an unexpected error: {e:?}")),
        }
    }
    Ok(cases.len())
}

fn record(variant: CifarVariant, labels: &[u8]) -> Vec<u8> {
    let mut r = labels.to_vec();
    r.resize(variant.record_len(), 128);
    r
}

fn malformed_cifar(dir: &Path) -> Result<usize, String> {
    use CifarVariant::{Cifar10, Cifar100};
    let c10 = |labels: &[&[u8]]| labels.iter().flat_map(|l| record(Cifar10, l)).collect::<Vec<u8>>();
    let c100 = |labels: &[&[u8]]| labels.iter().flat_map(|l| record(Cifar100, l)).collect::<Vec<u8>>();
    let good = c10(&[&[3], &[9]]);
    let cases: [(&str, CifarVariant, Option<Vec<u8>>, Expect); 10] = [
        ("empty file", Cifar10, Some(Vec::new()), truncated),
        (
            "record one byte short",
            Cifar10,
            Some(good[..good.len() - 1].to_vec()),
            truncated,
        ),
        (
            "one byte past the last record",
            Cifar10,
            Some([good.clone(), vec![0]].concat()),
            truncated,
        ),
        ("half a record", Cifar10, Some(good[..1500].to_vec()), truncated),
        ("label 10", Cifar10, Some(c10(&[&[1], &[10]])), format_error),
        ("label 255", Cifar10, Some(c10(&[&[255]])), format_error),
        ("fine label 100", Cifar100, Some(c100(&[&[3, 100]])), format_error),
        ("coarse label 20", Cifar100, Some(c100(&[&[20, 4]])), format_error),
        (
            "CIFAR-10 records read as CIFAR-100",
            Cifar100,
            Some(good.clone()),
            truncated,
        ),
        ("missing batch file", Cifar10, None, truncated),
    ];
    fs::write(dir.join("test_batch.bin"), &good).unwrap();
    load_cifar(dir, Cifar10, Split::Test).map_err(|e| format!("well-formed CIFAR-10 batch rejected: {e}"))?;
    for (name, variant, bytes, expect) in &cases {
        let file: PathBuf = dir.join(if *variant == Cifar10 {
            "test_batch.bin"
        } else {
            "test.bin"
        });
        match bytes {
            Some(b) => fs::write(&file, b).unwrap(),
            None => fs::remove_file(&file).unwrap(),
        }
        match load_cifar(dir, *variant, Split::Test) {
            Ok(_) => return Err(format!("CIFAR `{name}` was accepted")),
            Err(e) if expect(&e) => {}
            Err(e) => return Err(format!("CIFAR `{name}` gave an unexpected error: {e:?}")),
        }
    }
    Ok(cases.len())
}

pub fn round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tensors = checkpoint_round_trip(tmp.path())?;
    let files = training_checkpoints(tmp.path())?;
    let idx = malformed_idx(tmp.path())?;
    let cifar = malformed_cifar(tmp.path())?;
    Ok(format!(
        "checkpoint with {tensors} tensors bit-exact, {files} training checkpoints re-encode identically; {idx} IDX and {cifar} CIFAR malformed files rejected"
    ))
}
