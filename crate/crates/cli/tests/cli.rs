use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn opsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsense"))
        .args(args)
        .env_remove("MOSDEN_LOG_LEVEL")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_on_every_subcommand() {
    let cases: &[(&[&str], &[&str])] = &[
        (&[], &["node", "registry", "plugin", "vsensor", "harness", "config"]),
        (&["node", "serve"], &["--port", "--registry", "--connection-cost-us", "--config"]),
        (&["registry", "serve"], &["--host", "--port", "--log-level"]),
        (&["plugin", "validate"], &["<FILE>"]),
        (&["vsensor", "validate"], &["--plugins-dir"]),
        (&["harness", "run"], &["--scenario", "--out", "--duration-s"]),
        (&["harness", "report"], &["<DIR>"]),
        (&["harness", "list-scenarios"], &[]),
        (&["harness", "compare"], &["<RESTFUL>", "<PUSH>", "--out"]),
        (&["config", "show"], &["--node-id"]),
    ];
    for (cmd, flags) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let o = opsense(&args);
        assert_eq!(code(&o), 0, "{args:?}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{args:?} help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&opsense(&["node", "serve", "--bogus"])), 2);
    assert_eq!(code(&opsense(&["node", "serve", "--port", "seventy"])), 2);
    assert_eq!(code(&opsense(&["frobnicate"])), 2);
    assert_eq!(code(&opsense(&[])), 2);
}

#[test]
fn plugin_validate_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.plugin");
    std::fs::write(
        &good,
        "format_version = 1\nplugin_id = \"sine\"\nmin_sampling_interval_ms = 10\n\n[source]\ntype = \"builtin\"\nname = \"sine_wave\"\n",
    )
    .unwrap();
    let o = opsense(&["plugin", "validate", good.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("ok"));

    let bad = dir.path().join("bad.plugin");
    std::fs::write(&bad, "format_version = 1\nplugin_id = \"sine\"\nmin_sampling_interval_ms = 10\n").unwrap();
    let o = opsense(&["plugin", "validate", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("source"), "{}", stderr(&o));

    let o = opsense(&["plugin", "validate", dir.path().join("missing.plugin").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_show_layers_env_over_defaults() {
    let o = Command::new(env!("CARGO_BIN_EXE_opsense"))
        .args(["config", "show", "--node-id", "n7"])
        .env("MOSDEN_PORT", "9123")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("node_id = \"n7\""), "{text}");
    assert!(text.contains("port = 9123"), "{text}");

    let o = opsense(&["config", "show", "--log-level", "loud"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("log_level"), "{}", stderr(&o));
}

#[test]
fn node_serve_on_an_occupied_port_fails() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let o = opsense(&["node", "serve", "--port", &port, "--log-level", "error"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn node_serve_prints_ready_line_and_shuts_down_on_request() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_opsense"))
        .args(["node", "serve", "--port", "0", "--node-id", "t1", "--log-level", "error"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let ready: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(ready["event"], "listening");
    assert_eq!(ready["role"], "node");
    assert_eq!(ready["node_id"], "t1");

    let mut s = TcpStream::connect(ready["addr"].as_str().unwrap()).unwrap();
    write!(
        s,
        "POST /v1/control/shutdown HTTP/1.1\r\nhost: x\r\ncontent-length: 0\r\nconnection: close\r\n\r\n"
    )
    .unwrap();
    let mut reply = String::new();
    s.read_to_string(&mut reply).unwrap();
    assert!(reply.starts_with("HTTP/1.1 2"), "{reply}");
    assert!(child.wait().unwrap().success());
}

#[test]
fn list_scenarios_names_every_bundled_scenario() {
    let o = opsense(&["harness", "list-scenarios"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 13);
    for m in ["restful", "push"] {
        for n in [30, 60, 90] {
            for s in [1, 2] {
                assert!(text.contains(&format!("setup{s}-{m}-{n}\t")), "setup{s}-{m}-{n}");
            }
        }
    }
    assert!(text.contains("storage-linearity"));
}

fn shares_total(dir: &Path) -> u64 {
    let mut r = csv::Reader::from_path(dir.join("shares.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "round_trips").unwrap();
    r.records().map(|x| x.unwrap()[col].parse::<u64>().unwrap()).sum()
}

#[test]
fn harness_run_one_sensor_for_ten_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("tiny.scenario");
    std::fs::write(
        &scenario,
        "format_version = 1\nname = \"tiny\"\nkind = \"load\"\ntopology = \"workstation_server\"\n\
         clients = 1\nsensors_per_client = 1\nsampling_interval_ms = 1000\nmode = \"restful\"\n\
         requests = 1\nduration_s = 10\nresource_sample_ms = 1000\nseed = 4\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = opsense(&[
        "harness",
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--log-level",
        "error",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trips = shares_total(&out);
    assert!((8..=11).contains(&trips), "{trips} round trips");
    for f in ["events.jsonl", "roundtrips.csv", "resources.csv", "summary.csv", "report.json", "scenario.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Regenerating from the event log reproduces the files byte for byte.
    let before = std::fs::read(out.join("roundtrips.csv")).unwrap();
    let o = opsense(&["harness", "report", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("roundtrips.csv")).unwrap(), before);

    let cmp = dir.path().join("cmp");
    let o = opsense(&[
        "harness",
        "compare",
        out.to_str().unwrap(),
        out.to_str().unwrap(),
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(cmp.join("summary.csv")).unwrap();
    assert!(summary.contains("push_over_restful_round_trip_ratio"));
}

#[test]
fn harness_rejects_more_requests_than_sensors() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.scenario");
    std::fs::write(
        &scenario,
        "format_version = 1\nname = \"bad\"\nkind = \"load\"\ntopology = \"workstation_server\"\n\
         clients = 1\nsensors_per_client = 2\nsampling_interval_ms = 1000\nmode = \"push\"\n\
         requests = 3\nduration_s = 5\nresource_sample_ms = 1000\nseed = 1\n",
    )
    .unwrap();
    let o = opsense(&["harness", "run", "--scenario", scenario.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("requests"), "{}", stderr(&o));
}
