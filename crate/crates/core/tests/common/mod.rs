#![allow(dead_code)]

use std::sync::Arc;

use envforge::agent::{drive, start_session, BuildConfig, RepoSpec, ScriptedPolicy};
use envforge::sandbox::guard::GuardConfig;
use envforge::sandbox::helpers::make_patch;
use envforge::sandbox::sim::{PackageEntry, RemoteRepo, TestOutcome, TestProfile};
use envforge::sandbox::{Backend, SimWorld};
use envforge::synth::{replay_sim, synthesize, ReplayContext};
use envforge::trace::{Outcome, Trace};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub const REPO: &str = "example/project";
pub const SHA: &str = "5f3c2a1";
pub const APP_BUGGY: &str = "def greet(name):\n    return f\"hello {name[\"first\"]}\"\n";
pub const APP_FIXED: &str = "def greet(name):\n    return f\"hello {name['first']}\"\n";

/// Installs that fail but leave packages behind.
pub const POLLUTERS: &[(&str, &[&str])] = &[
    ("cupy", &["fastrlock", "numpy"]),
    ("zbarlight", &["pillow"]),
    ("mxnet-cu91", &["chardet", "idna", "urllib3"]),
    ("url", &["six"]),
    ("adb", &["libusb1", "typing"]),
    ("winpdb", &["numpy", "six"]),
    ("libarchive", &["nose"]),
];

pub fn repo() -> RepoSpec {
    RepoSpec::remote(REPO, SHA)
}

pub fn world(profile: TestProfile) -> SimWorld {
    let files = [
        ("README.md", "# project\n"),
        ("src/app.py", APP_BUGGY),
        (
            "tests/test_app.py",
            "from app import greet\n\ndef test_greet():\n    assert greet({'first': 'a'})\n",
        ),
        ("requirements.txt", "requests>=2.0\nsix\n"),
    ];
    let mut w = SimWorld::default()
        .with_package("pytest", PackageEntry::ok("8.0.0"))
        .with_package(
            "B",
            PackageEntry::ok("1.5.1").with_versions(&["2.1.0", "0.9"]),
        )
        .with_package("six", PackageEntry::ok("1.16.0"))
        .with_package(
            "requests",
            PackageEntry::ok("2.31.0").with_requires(&["urllib3", "idna"]),
        )
        .with_package("urllib3", PackageEntry::ok("2.2.1"))
        .with_package("idna", PackageEntry::ok("3.6"))
        .with_package(
            "numpy",
            PackageEntry::ok("1.26.4").with_versions(&["1.24.4", "1.19.5"]),
        )
        .with_package("pyyaml", PackageEntry::ok("6.0.1"))
        .with_package("fastrlock", PackageEntry::ok("0.8.2"))
        .with_package("pillow", PackageEntry::ok("10.2.0"))
        .with_package("chardet", PackageEntry::ok("5.2.0"))
        .with_package("libusb1", PackageEntry::ok("3.1.0"))
        .with_package("typing", PackageEntry::ok("3.7.4.3"))
        .with_package("nose", PackageEntry::ok("1.3.7"))
        .with_package("tensorflow-gpu", PackageEntry::fail_clean())
        .with_package("libgl1", PackageEntry::ok("1.7.0").apt())
        .with_package("curl", PackageEntry::ok("7.88.1").apt())
        .with_remote(
            &format!("https://github.com/{REPO}.git"),
            RemoteRepo {
                files: files
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
                shas: vec![SHA.into()],
            },
        )
        .with_tests(profile);
    for (name, side) in POLLUTERS {
        w = w.with_package(name, PackageEntry::fail_polluting(side));
    }
    w
}

/// The worked example: safe read, an ok install, a polluting failure, a
/// switch to 3.11, a code edit, a ranged install, a runner install, an export.
pub fn worked_example_actions() -> Vec<String> {
    vec![
        "cat README.md".into(),
        "pip install six".into(),
        "pip install cupy".into(),
        "change_python_version 3.11".into(),
        format!(
            "edit_file src/app.py\n{}",
            make_patch(
                "    return f\"hello {name[\"first\"]}\"",
                "    return f\"hello {name['first']}\""
            )
        ),
        "pip install 'B>=1.0,<2.0'".into(),
        "pip install pytest".into(),
        "export PYTHONPATH=/repo/src".into(),
        "runtest".into(),
    ]
}

pub fn worked_example_world() -> SimWorld {
    let mut profile = TestProfile::new(TestOutcome::RunsPass);
    profile.min_python = Some("3.11".into());
    world(profile)
}

pub struct BuildRun {
    pub trace: Trace,
    pub state: envforge::sandbox::SimState,
}

pub fn build(world: SimWorld, actions: Vec<String>, rollback: bool) -> BuildRun {
    let backend = Backend::Sim(Arc::new(world));
    let cfg = BuildConfig {
        guard: GuardConfig {
            rollback,
            ..GuardConfig::default()
        },
        ..BuildConfig::default()
    };
    let mut session = start_session(&repo(), &backend, &cfg).expect("fixture repo stages");
    let mut policy = ScriptedPolicy::new(actions);
    let outcome = drive(&mut session, &mut policy, &cfg.budget, &mut |_| {});
    let state = session
        .sandbox()
        .as_sim()
        .expect("sim backend")
        .state()
        .clone();
    BuildRun {
        trace: session.into_trace(outcome),
        state,
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Replay {
    Equal,
    Diverged(String),
    Failed(String),
    Unverified(Outcome),
}

/// Synthesizes the trace, replays it on a fresh sim and compares with the build state.
pub fn replay_check(world: SimWorld, run: &BuildRun) -> Replay {
    if run.trace.outcome != Outcome::Verified {
        return Replay::Unverified(run.trace.outcome);
    }
    let program = match synthesize(&run.trace) {
        Ok(p) => p,
        Err(e) => return Replay::Failed(e.to_string()),
    };
    match replay_sim(
        &program.statements,
        &ReplayContext::from_program(&program),
        Arc::new(world),
    ) {
        Err(e) => Replay::Failed(e.to_string()),
        Ok(sb) => {
            let got = sb.state().without_cwd();
            let want = run.state.without_cwd();
            if got == want {
                Replay::Equal
            } else {
                Replay::Diverged(describe_diff(&want, &got))
            }
        }
    }
}

fn describe_diff(want: &envforge::sandbox::SimState, got: &envforge::sandbox::SimState) -> String {
    let a = format!("{want:#?}");
    let b = format!("{got:#?}");
    let (al, bl): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    for (i, (x, y)) in al.iter().zip(bl.iter()).enumerate() {
        if x != y {
            return format!("line {i}: build `{}` vs replay `{}`", x.trim(), y.trim());
        }
    }
    format!(
        "state dumps differ in length ({} vs {} lines)",
        al.len(),
        bl.len()
    )
}

/// A random scenario: command mix, 10% failures of which 30% pollute,
/// 0 to 2 base-image changes and 0 to 3 exports over a small key set.
pub fn random_actions(rng: &mut StdRng) -> Vec<String> {
    let steps = rng.gen_range(4..14);
    let mut actions: Vec<String> = Vec::new();
    let mut made: Vec<String> = Vec::new();
    let mut dirs: Vec<String> = vec!["/repo".into()];
    for i in 0..steps {
        if rng.gen_bool(0.1) {
            if rng.gen_bool(0.3) {
                actions.push(match rng.gen_range(0..3) {
                    0 | 1 => format!("pip install {}", POLLUTERS.choose(rng).unwrap().0),
                    _ => format!("touch /repo/junk_{i}.log && false"),
                });
            } else {
                actions.push(
                    [
                        "pip install tensorflow-gpu",
                        "pip install no-such-package",
                        "false",
                        "ls /missing",
                        "python3 -c 'import yaml'",
                    ]
                    .choose(rng)
                    .unwrap()
                    .to_string(),
                );
            }
            continue;
        }
        let action = match rng.gen_range(0..15) {
            0 => format!(
                "pip install {}",
                ["six", "requests", "pyyaml", "idna"].choose(rng).unwrap()
            ),
            1 => [
                "pip install 'B>=1.0,<2.0'",
                "pip install 'numpy<1.26'",
                "pip install numpy==1.19.5",
                "pip install 'requests[socks]'",
            ]
            .choose(rng)
            .unwrap()
            .to_string(),
            2 => format!(
                "apt-get install -y {}",
                ["libgl1", "curl"].choose(rng).unwrap()
            ),
            3 => {
                let d = format!("/repo/d{i}");
                dirs.push(d.clone());
                format!("mkdir -p {d}/sub")
            }
            4 => {
                let f = format!("{}/f{i}.txt", dirs.choose(rng).unwrap());
                made.push(f.clone());
                format!("echo line{i} > {f}")
            }
            5 => match made.choose(rng) {
                Some(f) => format!("echo more{i} >> {f}"),
                None => format!("touch /repo/t{i}"),
            },
            6 => format!("cd {}", dirs.choose(rng).unwrap()),
            7 => {
                made.push(format!("rel_{i}.txt"));
                format!("touch rel_{i}.txt")
            }
            8 => match made.iter().position(|f| f.starts_with('/')) {
                Some(p) => format!("rm {}", made.remove(p)),
                None => "ls -la".into(),
            },
            9 => [
                "cat README.md",
                "ls",
                "pwd",
                "grep -r greet /repo",
                "wc -l /repo/README.md",
            ]
            .choose(rng)
            .unwrap()
            .to_string(),
            10 => format!(
                "edit_file /repo/gen_{i}.py\n{}",
                make_patch("", &format!("VALUE = {i}\n"))
            ),
            11 => format!("cp /repo/README.md /repo/copy_{i}.md"),
            12 => "waitinglist add -p six -t pip".into(),
            13 => "download".into(),
            _ => "runpipreqs".into(),
        };
        actions.push(action);
    }
    let exports = rng.gen_range(0..=3);
    for n in 0..exports {
        let key = ["EF_A", "EF_B"].choose(rng).unwrap();
        let at = rng.gen_range(0..=actions.len());
        actions.insert(at, format!("export {key}=v{n}_{}", rng.gen_range(0..100)));
    }
    let changes = rng.gen_range(0..=2);
    for _ in 0..changes {
        let at = rng.gen_range(0..=actions.len());
        let verb = [
            "change_python_version 3.11",
            "change_python_version 3.9",
            "clear_configuration",
        ]
        .choose(rng)
        .unwrap();
        actions.insert(at, verb.to_string());
    }
    actions.push("pip install pytest".into());
    actions.push("runtest".into());
    actions
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}
