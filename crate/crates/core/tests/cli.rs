//! Drives the `lyricjam` binary through a whole tiny pipeline.

use std::path::Path;
use std::process::{Command, Output};

use lyricjam::audio::{self, AudioClip};

fn lyricjam(data: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lyricjam"))
        .args(args)
        .env("LYRICJAM_DATA_DIR", data)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{args:?} stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(data: &Path, args: &[&str]) -> String {
    let out = lyricjam(data, args);
    assert!(out.status.success(), "{args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&data, &["synth-corpus", "--pairs", "6", "--seed", "1"]);
    assert!(data.join("corpus/manifest.tsv").is_file());
    // Hold out enough clips that every cluster is represented.
    ok(&data, &["train-spec-vae", "--epochs", "1", "--heldout", "0.5"]);
    ok(&data, &["train-text-cvae", "--prior", "standard", "--epochs", "1"]);
    ok(&data, &["train-text-cvae", "--prior", "spec", "--epochs", "1"]);
    ok(&data, &["train-gan", "--epochs", "1"]);
    for f in ["vocab.json", "split.json", "spec_vae_epochs.csv", "gan_steps.csv"] {
        assert!(data.join("models").join(f).is_file(), "{f}");
    }

    // 15 s of audio: one full window and one padded tail.
    let wav = tmp.path().join("jam.wav");
    let pcm: Vec<i16> = (0..15 * 16_000).map(|i| ((i as f64 * 0.07).sin() * 8000.0) as i16).collect();
    std::fs::write(&wav, audio::encode_wav(&AudioClip::new(pcm, 16_000, 1).unwrap()).unwrap()).unwrap();
    let wav = wav.to_str().unwrap();
    for mode in ["baseline", "topology", "gan"] {
        let args = ["generate", "--wav", wav, "--mode", mode, "--n", "8", "--k", "2", "--seed", "4"];
        let first = ok(&data, &args);
        assert_eq!(first, ok(&data, &args), "{mode} output differs between runs");
        assert_eq!(first.matches("# window").count(), 2);
    }

    // Thresholds nobody can miss, then one nobody can meet.
    let lax = tmp.path().join("lax.json");
    std::fs::write(
        &lax,
        r#"{"min_topology_purity": 0, "min_purity_gap": -1, "max_mse_ratio": 1e9, "min_centroid_transfer": 0}"#,
    )
    .unwrap();
    let strict = tmp.path().join("strict.json");
    std::fs::write(&strict, r#"{"min_topology_purity": 1.5}"#).unwrap();
    let eval = |cfg: &Path| lyricjam(&data, &["eval", "--n", "6", "--config", cfg.to_str().unwrap()]);
    assert_eq!(eval(&lax).status.code(), Some(0));
    let missed = eval(&strict);
    assert_eq!(missed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missed.stdout).contains("missed:"));
    assert!(data.join("eval_report.json").is_file());

    let typo = tmp.path().join("typo.json");
    std::fs::write(&typo, r#"{"min_topology_purty": 0.5}"#).unwrap();
    assert_eq!(eval(&typo).status.code(), Some(2));
}

#[test]
fn data_dir_flag_wins_over_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let flagged = tmp.path().join("flagged");
    let out = lyricjam(
        &tmp.path().join("env"),
        &["--data-dir", flagged.to_str().unwrap(), "synth-corpus", "--pairs", "2"],
    );
    assert!(out.status.success());
    assert!(flagged.join("corpus/manifest.tsv").is_file());
    assert!(!tmp.path().join("env").exists());
}

#[test]
fn missing_models_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lyricjam(tmp.path(), &["train-gan", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
