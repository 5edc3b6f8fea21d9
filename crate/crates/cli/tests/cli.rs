use std::path::Path;
use std::process::{Command, Output};

fn apgan(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_apgan"));
    c.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("exp.cfg");
    let text = format!(
        "task = sisr\nseed = 5\nepochs = 2\nbatch_size = 2\nimage_size = 32\ntrain_images = 2\neval_images = 2\n\
         generator_channels = 8\ngenerator_blocks = 1\nphi = 0\n{extra}"
    );
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_populates_report_and_eval_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tiny_config(tmp.path(), "");
    let o = apgan(&["train", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.txt",
        "losses.csv",
        "unfreeze_log.csv",
        "metrics.json",
        "checkpoints/final.ckpt",
        "plots/losses.png",
        "plots/unfreeze.png",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let plot = image::open(run.join("plots/losses.png")).unwrap();
    assert!(plot.width() > 0);

    let eval_dir = tmp.path().join("eval");
    let ckpt = run.join("checkpoints/final.ckpt");
    let o = apgan(
        &["eval", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &Path| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let (train_m, eval_m) = (read(&run.join("metrics.json")), read(&eval_dir.join("metrics.json")));
    assert_eq!(train_m["per_image"], eval_m["per_image"]);
    assert_eq!(std::fs::read_dir(eval_dir.join("images")).unwrap().count(), 2);

    let o = apgan(&["inspect-checkpoint", ckpt.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("unfrozen units: 2/13") && out.contains("phi = 0"), "{out}");
}

#[test]
fn eval_on_image_folder_scores_every_image() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tiny_config(tmp.path(), "epochs = 1\n");
    assert!(apgan(
        &[
            "train",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--no-plots"
        ],
        &[]
    )
    .status
    .success());
    let hr = tmp.path().join("hr");
    std::fs::create_dir(&hr).unwrap();
    for i in 0..5u32 {
        let img = image::RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([(x * 8) as u8, (y * 8) as u8, (i * 40) as u8])
        });
        img.save(hr.join(format!("img{i}.png"))).unwrap();
    }
    let ckpt = run.join("checkpoints/final.ckpt");
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("eval{k}"));
        let o = apgan(
            &[
                "eval",
                ckpt.to_str().unwrap(),
                "--dataset",
                hr.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 5);
        reports.push(
            std::fs::read_to_string(out.join("metrics.json"))
                .unwrap()
                .replace(&format!("eval{k}"), ""),
        );
    }
    let v: serde_json::Value = serde_json::from_str(&reports[0]).unwrap();
    let rows = v["per_image"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let mean: f64 = rows.iter().map(|r| r["ssim"].as_f64().unwrap()).sum::<f64>() / 5.0;
    assert!((mean - v["mean_ssim"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "phi = 1.2\n");
    let o = apgan(&["train", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("phi"), "{}", stderr(&o));

    let missing = tmp.path().join("nowhere");
    let cfg = tiny_config(tmp.path(), &format!("data_root = {}\n", missing.display()));
    let o = apgan(&["train", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));

    let cfg = tiny_config(tmp.path(), "");
    let o = apgan(&["train", cfg.to_str().unwrap()], &[("APGAN_BETA1", "2")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta1"));

    let o = apgan(&["train", tmp.path().join("absent.cfg").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));

    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = apgan(
        &[
            "eval",
            junk.to_str().unwrap(),
            "--out",
            tmp.path().join("e").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablation_emits_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let matrix = tmp.path().join("matrix.cfg");
    std::fs::write(
        &matrix,
        "task = sisr\nseed = 2\nepochs = 1\nbatch_size = 2\nimage_size = 32\ntrain_images = 2\neval_images = 1\n\
         generator_channels = 8\ngenerator_blocks = 1\nvariants = Dense_D+F, Dense_D+SN+F, Dense_D+SN+UF\n",
    )
    .unwrap();
    let out = tmp.path().join("abl");
    let o = apgan(
        &["ablate", matrix.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("comparison.md")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 3, "{table}");
    for (row, label) in rows.iter().zip(["Dense_D+F", "Dense_D+SN+F", "Dense_D+SN+UF"]) {
        assert!(row.contains(label));
    }
    let cfg = |v: &str| std::fs::read_to_string(out.join(v).join("config.txt")).unwrap();
    assert!(cfg("Dense_D+F").contains("sn = false") && cfg("Dense_D+SN+UF").contains("policy = progressive"));
    // Shared seed: identical data order, hence identical first-step pixel loss
    // for the two frozen variants whose generators start from the same weights.
    let first = |v: &str| {
        std::fs::read_to_string(out.join(v).join("losses.csv"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("0,0,g_aux"))
            .unwrap()
            .to_string()
    };
    assert_eq!(first("Dense_D+F"), first("Dense_D+SN+F"));

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "task = sisr\nvariants = Dense_D+SN\n").unwrap();
    assert_eq!(apgan(&["ablate", bad.to_str().unwrap()], &[]).status.code(), Some(2));
}
