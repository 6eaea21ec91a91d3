//! Every `hint` subcommand in order on a small synthetic dataset, run in-process.
//!
//!     cargo run --release --example cli_pipeline

fn main() {
    let dir = std::env::temp_dir().join("hint_cli_pipeline");
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    std::fs::create_dir_all(&dir).expect("work dir");
    std::fs::write(dir.join("run.conf"), "window_length = 32\nhidden_dim = 16\ngru_hidden = 16\nk = 3\n").expect("config");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--n-mainline", "6", "--n-ramp", "3", "--days", "4", "--out", &p("data")],
        vec!["build-graph", "--data", &p("data"), "--k", "3", "--out", &p("graph")],
        vec!["extract-features", "--data", &p("data"), "--out", &p("features")],
        vec!["--config", &p("run.conf"), "train", "--data", &p("data"), "--epochs", "3", "--out", &p("model")],
        vec!["evaluate", "--data", &p("data"), "--checkpoint", &p("model/model.ckpt"), "--out", &p("eval")],
        vec!["baseline", "--data", &p("data"), "--checkpoint", &p("model/model.ckpt"), "--method", "knn", "--k", "3", "--out", &p("knn")],
        vec!["impute", "--data", &p("data"), "--checkpoint", &p("model/model.ckpt"), "--out", &p("imputed.csv")],
    ]
    .into_iter()
    .map(|s| s.into_iter().map(String::from).collect())
    .collect();
    for args in steps {
        println!("$ hint {}", args.join(" "));
        let code = hint::cli::run(std::iter::once("hint".to_string()).chain(args));
        if code != 0 {
            eprintln!("exit code {code}");
            std::process::exit(code);
        }
    }
}
