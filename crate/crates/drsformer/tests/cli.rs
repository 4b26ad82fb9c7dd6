use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drsformer::checkpoint::Checkpoint;
use drsformer::core::image::Image;
use drsformer::core::network::{build_model, NetworkConfig};
use drsformer::core::rain::RainPreset;
use drsformer::dataset::DatasetSpec;
use drsformer::imageio::{load_image, save_ppm};
use tempfile::TempDir;

fn cli(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drsformer"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn make_dataset(out: &Path, count: usize, size: &str, seed: u64) -> Output {
    cli(&[
        &"make-dataset",
        &"--out",
        &out,
        &"--count",
        &count.to_string(),
        &"--size",
        &size,
        &"--seed",
        &seed.to_string(),
    ])
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMOKE: &str = "[network]\npreset = \"smoke\"\n\n[train]\nbatch = 2\npatch = 16\neval_interval = 5\n\
                     lr_fixed_iters = 4\nlr_cosine_iters = 16\n";

fn smoke_config(dir: &Path) -> PathBuf {
    let path = dir.join("smoke.toml");
    fs::write(&path, SMOKE).unwrap();
    path
}

fn train(config: &Path, data: &Path, out: &Path, iterations: u64, resume: Option<&Path>) -> Output {
    let it = iterations.to_string();
    let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![
        &"train",
        &"--config",
        &config,
        &"--data",
        &data,
        &"--out",
        &out,
        &"--iterations",
        &it,
    ];
    if let Some(r) = &resume {
        args.push(&"--resume");
        args.push(r);
    }
    cli(&args)
}

#[test]
fn make_dataset_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&make_dataset(&a, 10, "16x24", 7)), 0);
    assert_eq!(code(&make_dataset(&b, 10, "16x24", 7)), 0);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 21);
    assert_eq!(ta, tb);
    let img = load_image(&a.join("rainy/0003.ppm")).unwrap();
    assert_eq!((img.width(), img.height()), (24, 16));
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("test\t")).count(), 1);
}

#[test]
fn heavy_rain_changes_more_than_light() {
    let mean_change = |preset: RainPreset| {
        let spec = DatasetSpec {
            count: 4,
            width: 32,
            height: 32,
            rain: preset.params(0),
            test_count: 0,
            seed: 11,
        };
        let samples = spec.generate().unwrap();
        samples
            .iter()
            .map(|s| s.rainy.mean_abs_diff(&s.clean).unwrap())
            .sum::<f64>()
            / 4.0
    };
    let (light, heavy) = (mean_change(RainPreset::Light), mean_change(RainPreset::Heavy));
    assert!(heavy > light, "heavy {heavy} vs light {light}");
}

#[test]
fn sizes_off_the_grid_are_rejected() {
    let dir = TempDir::new().unwrap();
    let o = make_dataset(&dir.path().join("d"), 2, "33x33", 0);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("multiple of 8"), "{}", stderr(&o));
}

#[test]
fn smoke_training_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&make_dataset(&data, 4, "16x16", 1)), 0);
    let out = dir.path().join("run");
    let o = train(&smoke_config(dir.path()), &data, &out, 10, None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.drsf", "best.drsf", "run.log", "config.toml"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let log = drsformer::logs::read_run_log(&out.join("run.log")).unwrap();
    assert_eq!(
        log.iter().map(|l| l.iteration).collect::<Vec<_>>(),
        (1..=10).collect::<Vec<_>>()
    );
    assert_eq!(log.iter().filter(|l| l.eval.is_some()).count(), 2);
    assert_eq!(
        Checkpoint::load(&out.join("checkpoint.drsf")).unwrap().iteration,
        10
    );

    // The resolved config alone reproduces the run.
    let again = dir.path().join("again");
    let o = cli(&[
        &"train",
        &"--config",
        &out.join("config.toml"),
        &"--data",
        &data,
        &"--out",
        &again,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("checkpoint.drsf")).unwrap(),
        fs::read(again.join("checkpoint.drsf")).unwrap()
    );
}

#[test]
fn resumed_run_matches_a_straight_run() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&make_dataset(&data, 4, "16x16", 2)), 0);
    let config = smoke_config(dir.path());
    let (half, resumed, straight) = (
        dir.path().join("half"),
        dir.path().join("resumed"),
        dir.path().join("straight"),
    );
    assert_eq!(code(&train(&config, &data, &half, 10, None)), 0);
    let o = train(&config, &data, &resumed, 20, Some(&half.join("checkpoint.drsf")));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&train(&config, &data, &straight, 20, None)), 0);
    let a = fs::read(resumed.join("checkpoint.drsf")).unwrap();
    let b = fs::read(straight.join("checkpoint.drsf")).unwrap();
    assert!(a == b, "resumed and straight checkpoints differ");

    let tiny = dir.path().join("tiny.toml");
    fs::write(
        &tiny,
        "[network]\npreset = \"tiny\"\n[train]\nbatch = 1\npatch = 16\n",
    )
    .unwrap();
    let o = train(
        &tiny,
        &data,
        &dir.path().join("x"),
        20,
        Some(&half.join("checkpoint.drsf")),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--allow-config-mismatch"), "{}", stderr(&o));
}

#[test]
fn corrupt_manifest_line_is_named() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&make_dataset(&data, 3, "16x16", 0)), 0);
    let path = data.join("manifest.tsv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("train\tonly-two-fields\n");
    fs::write(&path, &text).unwrap();
    let line = text.lines().count();
    let o = train(&smoke_config(dir.path()), &data, &dir.path().join("run"), 1, None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let t = drsformer::core::verify::random(&[3, h, w], seed, 0.5);
    Image::from_fn(w, h, |x, y| {
        core::array::from_fn(|c| (t.data()[(c * h + y) * w + x] + 0.5) as f32)
    })
    .unwrap()
}

fn identity_checkpoint(path: &Path) {
    let mut model = build_model::<f32>(&NetworkConfig::smoke(), 3).unwrap();
    let (w, b) = model.layout.output;
    model.store.get_mut(w).data_mut().fill(0.0);
    model.store.get_mut(b).data_mut().fill(0.0);
    Checkpoint::from_model(&model).save(path).unwrap();
}

#[test]
fn derain_with_zero_output_projection_is_identity_at_any_size() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("id.drsf");
    identity_checkpoint(&ckpt);
    let input = dir.path().join("odd.ppm");
    let image = noise_image(100, 67, 5);
    save_ppm(&image, &input).unwrap();
    let out = dir.path().join("out");
    let o = cli(&[
        &"derain", &"--ckpt", &ckpt, &"--in", &input, &"--out", &out, &"--png",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("odd\t100x67"), "{}", stdout(&o));
    let restored = load_image(&out.join("odd.ppm")).unwrap();
    assert_eq!((restored.width(), restored.height()), (100, 67));
    assert_eq!(restored.to_rgb8(), load_image(&input).unwrap().to_rgb8());
    assert!(out.join("odd.png").is_file());
}

#[test]
fn derain_directory_skips_unreadable_files() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("id.drsf");
    identity_checkpoint(&ckpt);
    let input = dir.path().join("in");
    for i in 0..3 {
        save_ppm(&noise_image(20, 12, i), &input.join(format!("img{i}.ppm"))).unwrap();
    }
    fs::write(input.join("broken.ppm"), b"P6 nonsense").unwrap();
    let out = dir.path().join("out");
    let o = cli(&[&"derain", &"--ckpt", &ckpt, &"--in", &input, &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("broken.ppm"));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 3);

    let bad = dir.path().join("bad");
    fs::create_dir(&bad).unwrap();
    fs::write(bad.join("x.png"), b"not a png").unwrap();
    assert_ne!(
        code(&cli(&[
            &"derain", &"--ckpt", &ckpt, &"--in", &bad, &"--out", &out
        ])),
        0
    );
}

#[test]
fn eval_against_ground_truth_and_missing_outputs() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&make_dataset(&data, 20, "16x16", 4)), 0);
    let results = dir.path().join("gt.tsv");
    let o = cli(&[
        &"eval",
        &"--pairs",
        &data.join("manifest.tsv"),
        &"--restored",
        &data.join("clean"),
        &"--results",
        &results,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&results).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().last().unwrap(), "mean\t100.0000\t1.000000");

    // Rainy inputs give the do-nothing baseline; the mean row is the mean of the rows.
    let o = cli(&[&"eval", &"--pairs", &data, &"--restored", &data.join("rainy")]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(data.join("rainy/results.tsv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split('\t').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let (body, mean) = rows.split_at(rows.len() - 1);
    let avg = body.iter().map(|r| r[0]).sum::<f64>() / body.len() as f64;
    assert!((avg - mean[0][0]).abs() < 1e-3 && mean[0][0] < 100.0);

    fs::remove_file(data.join("clean/0019.ppm")).unwrap();
    let o = cli(&[&"eval", &"--pairs", &data, &"--restored", &data.join("clean")]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("0019"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_unit_and_catches_corruption() {
    let o = cli(&[&"gradcheck", &"--scope", &"ops", &"--seed", &"1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for unit in drsformer::core::verify::unit_names(drsformer::core::verify::Scope::Ops) {
        assert!(
            out.lines().any(|l| l.starts_with(&format!("{unit}\t"))),
            "{unit} not listed"
        );
    }
    let o = cli(&[&"gradcheck", &"--scope", &"blocks", &"--corrupt", &"msfn"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("msfn\t") && l.ends_with("FAIL")));
    assert_eq!(code(&cli(&[&"gradcheck", &"--scope", &"everything"])), 1);
}

#[test]
fn bench_attn_rows() {
    let o = cli(&[
        &"bench-attn",
        &"--channels",
        &"64",
        &"--hw",
        &"8",
        &"--ratios",
        &"0.5,0.8,1.0",
        &"--reps",
        &"2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[0][1], rows[0][4]), ("32", "0.500000"));
    assert!(rows[2][5].parse::<f64>().unwrap() < 1e-6);
}
