use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn snmt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snmt"))
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("snmt-cli-{name}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_flag_exits_2() {
    let out = snmt().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = snmt().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_1() {
    let out = snmt()
        .args(["tokenize", "--input", "/nonexistent/file.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn tokenize_detokenize_round_trip() {
    let dir = tmpdir("roundtrip");
    let raw = dir.join("raw.txt");
    let tok = dir.join("tok.txt");
    fs::write(&raw, "Hello, world!\nThe price is $25.\n").unwrap();
    let out = snmt()
        .args(["tokenize", "--input"])
        .arg(&raw)
        .arg("--output")
        .arg(&tok)
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = snmt()
        .args(["detokenize", "--input"])
        .arg(&tok)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "Hello, world!\nThe price is $25.\n"
    );
}

/// A model trained on a copy task reproduces its training inputs with a
/// greedy (beam 1) decode, and training with a fixed seed is bit-for-bit
/// reproducible.
#[test]
fn train_is_deterministic_and_copies() {
    let dir = tmpdir("train");
    let src = dir.join("copy.src");
    let cfg = dir.join("cfg.txt");
    let mut lines = String::new();
    // Small deterministic corpus over a 10-word vocabulary.
    let mut state: u64 = 42;
    let mut next = move |n: u64| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) % n
    };
    for _ in 0..300 {
        let len = 2 + next(5);
        let words: Vec<String> = (0..len).map(|_| format!("w{}", next(10))).collect();
        lines.push_str(&words.join(" "));
        lines.push('\n');
    }
    fs::write(&src, &lines).unwrap();
    fs::write(
        &cfg,
        "seed=7\nembed_size=16\nrnn_size=32\nnum_layers=1\nepochs=60\n\
         batch_size=8\nlearning_rate=1.0\nstart_decay_epoch=45\n",
    )
    .unwrap();

    let train = |out: &PathBuf| {
        let st = snmt()
            .args(["train", "--src"])
            .arg(&src)
            .arg("--tgt")
            .arg(&src)
            .arg("--out")
            .arg(out)
            .arg("--config")
            .arg(&cfg)
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    };
    let m1 = dir.join("m1.bin");
    let m2 = dir.join("m2.bin");
    train(&m1);
    train(&m2);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let probe = dir.join("probe.txt");
    let probe_lines: String = lines.lines().take(10).collect::<Vec<_>>().join("\n");
    fs::write(&probe, format!("{probe_lines}\n")).unwrap();
    let out = snmt()
        .args(["translate", "--beam", "1", "--model"])
        .arg(&m1)
        .arg("--input")
        .arg(&probe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hyp = String::from_utf8_lossy(&out.stdout);
    let matched = hyp
        .lines()
        .zip(probe_lines.lines())
        .filter(|(h, r)| h == r)
        .count();
    assert!(matched >= 8, "only {matched}/10 probes copied:\n{hyp}");
}

#[test]
fn unknown_config_key_exits_1() {
    let out = snmt()
        .args([
            "train", "--src", "/dev/null", "--tgt", "/dev/null", "--out", "/dev/null",
            "--set", "not_a_real_key=1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
