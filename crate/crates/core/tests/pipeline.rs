mod support;

use std::collections::HashMap;
use std::fs;

use kerblam::container::{self, ContainerError, ImageRef};
use kerblam::data::{self, FetchOptions, HttpTransport};
use kerblam::package::{self, PackageError, ReplayOptions};
use kerblam::workflow::{self, RunOptions, WorkflowError};
use kerblam::ProjectManifest;
use support::{pipeline_project, tree_hash, write, FixtureServer, Route, StubEngine, PIPELINE_RECIPE};

fn quiet(engine: &StubEngine, containerized: bool) -> RunOptions {
    RunOptions {
        profile: None,
        containerized,
        engine: Some(engine.handle()),
        stdout_to_stderr: true,
    }
}

#[test]
fn container_run_matches_local_run() {
    let tmp = tempfile::tempdir().unwrap();
    let engine = StubEngine::new(tmp.path());
    let project = pipeline_project(tmp.path(), None);
    let manifest = ProjectManifest::load(&project).unwrap();

    workflow::run(&manifest, Some("process"), &quiet(&engine, false)).unwrap();
    let local = tree_hash(&project.join("data/out"));
    assert_eq!(
        fs::read_to_string(project.join("data/out/summary.txt")).unwrap(),
        "3 114\nw,0.5\n"
    );
    for entry in fs::read_dir(project.join("data/out")).unwrap() {
        fs::remove_file(entry.unwrap().path()).unwrap();
    }

    let outcome = workflow::run(&manifest, Some("process"), &quiet(&engine, true)).unwrap();
    assert_eq!(outcome.image.as_deref(), Some("kerblam/pipeline:process"));
    assert_eq!(tree_hash(&project.join("data/out")), local);
    let calls = engine.calls();
    assert!(calls.iter().any(|c| c.starts_with("build -f ")));
    let run = calls.iter().find(|c| c.starts_with("run ")).unwrap();
    assert!(run.contains("-w /kerblam"));
    assert!(run.contains(":/kerblam/data/in "));
    assert!(run.contains(":/kerblam/.kerblam_entry.makefile:ro"));
    assert!(!project.join(".kerblam_entry.makefile").exists());
}

#[test]
fn build_context_leaves_out_data() {
    let tmp = tempfile::tempdir().unwrap();
    let engine = StubEngine::new(tmp.path());
    let project = pipeline_project(tmp.path(), None);
    write(
        &project,
        "src/dockerfiles/leak.dockerfile",
        "FROM local/base\nCOPY data /kerblam/data\n",
    );
    write(&project, "src/workflows/leak.sh", "true\n");
    let manifest = ProjectManifest::load(&project).unwrap();
    let err = container::build_image(
        &engine.handle(),
        &project.join("src/dockerfiles/leak.dockerfile"),
        &manifest,
        "leak",
    )
    .unwrap_err();
    match err {
        ContainerError::BuildFailed { log, .. } => assert!(log.contains("COPY source data not found"), "{log}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn container_run_without_recipe_fails_before_swapping() {
    let tmp = tempfile::tempdir().unwrap();
    let engine = StubEngine::new(tmp.path());
    let project = pipeline_project(tmp.path(), None);
    fs::remove_file(project.join("src/dockerfiles/process.dockerfile")).unwrap();
    let manifest = ProjectManifest::load(&project).unwrap();
    let before = tree_hash(&project);
    let err = workflow::run(&manifest, Some("process"), &quiet(&engine, true)).unwrap_err();
    assert!(matches!(err, WorkflowError::NoRecipe(ref w) if w == "process"));
    assert_eq!(tree_hash(&project), before);
}

#[test]
fn missing_engine_is_reported() {
    let err = container::detect_engine_with(&[], Some("/nonexistent/engine")).unwrap_err();
    assert!(matches!(err, ContainerError::EngineUnavailable(_)));
}

fn package_fixture(tmp: &std::path::Path) -> (StubEngine, std::path::PathBuf, ProjectManifest) {
    let engine = StubEngine::new(tmp);
    let project = pipeline_project(tmp, None);
    let manifest = ProjectManifest::load(&project).unwrap();
    (engine, project, manifest)
}

#[test]
fn replay_recreates_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (engine, project, manifest) = package_fixture(tmp.path());
    workflow::run(&manifest, Some("process"), &quiet(&engine, false)).unwrap();
    let original = tree_hash(&project.join("data/out"));

    let dest = tmp.path().join("pipeline.replay.tar.gz");
    let outcome = package::package(&manifest, Some("process"), &dest, &engine.handle()).unwrap();
    assert_eq!(outcome.image, "kerblam/pipeline:process");

    let workdir = tmp.path().join("fresh");
    let options = ReplayOptions {
        stdout_to_stderr: true,
        ..ReplayOptions::default()
    };
    let replayed = package::replay(&dest, &workdir, Some(&engine.handle()), &HttpTransport::new(), &options).unwrap();
    assert_eq!(replayed.status, 0);
    assert_eq!(tree_hash(&workdir.join("data/out")), original);
    assert_eq!(
        fs::read(workdir.join("data/in/patients.csv")).unwrap(),
        fs::read(project.join("data/in/patients.csv")).unwrap()
    );
    assert!(!workdir.join("src").exists(), "code travels in the image, not the tarball");
}

#[test]
fn replay_pulls_missing_image_and_reports_pull_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (engine, _project, manifest) = package_fixture(tmp.path());
    let dest = tmp.path().join("p.tar.gz");
    package::package(&manifest, Some("process"), &dest, &engine.handle()).unwrap();
    let tag = "kerblam/pipeline:process";
    engine.push(tag);
    engine.forget_image(tag);

    let options = ReplayOptions {
        stdout_to_stderr: true,
        ..ReplayOptions::default()
    };
    let workdir = tmp.path().join("pulled");
    package::replay(&dest, &workdir, Some(&engine.handle()), &HttpTransport::new(), &options).unwrap();
    assert!(engine.calls().iter().any(|c| c == &format!("pull {tag}")));
    assert!(workdir.join("data/out/summary.txt").exists());

    let other = StubEngine::new(&tmp.path().join("other"));
    let err = package::replay(
        &dest,
        &tmp.path().join("nopull"),
        Some(&other.handle()),
        &HttpTransport::new(),
        &options,
    )
    .unwrap_err();
    assert!(matches!(err, PackageError::Container(ContainerError::ImagePullFailed { .. })), "{err}");
}

#[test]
fn replay_fetches_remote_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let weights = b"w,0.5\n".to_vec();
    let server = FixtureServer::start(HashMap::from([("/weights.csv".to_owned(), Route::Body(weights.clone()))]));
    let engine = StubEngine::new(tmp.path());
    let project = pipeline_project(tmp.path(), Some((&server.url("/weights.csv"), &weights)));
    let manifest = ProjectManifest::load(&project).unwrap();
    assert!(data::fetch(&manifest, &HttpTransport::new(), FetchOptions::default()).is_success());
    workflow::run(&manifest, Some("process"), &quiet(&engine, false)).unwrap();
    let original = tree_hash(&project.join("data/out"));

    let dest = tmp.path().join("p.tar.gz");
    let outcome = package::package(&manifest, Some("process"), &dest, &engine.handle()).unwrap();
    assert_eq!(outcome.precious_files.len(), 1, "remote inputs are not shipped");
    let workdir = tmp.path().join("fresh");
    let options = ReplayOptions {
        stdout_to_stderr: true,
        ..ReplayOptions::default()
    };
    package::replay(&dest, &workdir, Some(&engine.handle()), &HttpTransport::new(), &options).unwrap();
    assert_eq!(server.hits("/weights.csv"), 2);
    assert_eq!(tree_hash(&workdir.join("data/out")), original);
}

#[test]
fn package_requires_a_recipe() {
    let tmp = tempfile::tempdir().unwrap();
    let (engine, project, manifest) = package_fixture(tmp.path());
    write(&project, "src/workflows/bare.sh", "true\n");
    let err = package::package(&manifest, Some("bare"), &tmp.path().join("x.tar.gz"), &engine.handle()).unwrap_err();
    assert!(matches!(err, PackageError::NoRecipe(ref w) if w == "bare"));
    assert!(!tmp.path().join("x.tar.gz").exists());
}

#[test]
fn cli_package_and_replay_use_engine_override() {
    let tmp = tempfile::tempdir().unwrap();
    let (engine, project, _) = package_fixture(tmp.path());
    let wrapper = engine.wrapper.to_str().unwrap().to_owned();
    let env = [("KERBLAM_CONTAINER_ENGINE", wrapper.as_str())];
    let archive = tmp.path().join("cli.tar.gz");
    let out = support::kerblam(
        &project,
        &["--json", "package", "process", "--output", archive.to_str().unwrap()],
        &env,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["image"], "kerblam/pipeline:process");

    let dry = support::kerblam(
        tmp.path(),
        &["--json", "replay", archive.to_str().unwrap(), "dry", "--dry-run"],
        &env,
    );
    assert!(dry.status.success(), "{}", String::from_utf8_lossy(&dry.stderr));
    assert!(!tmp.path().join("dry").exists());

    let real = support::kerblam(tmp.path(), &["--json", "replay", archive.to_str().unwrap(), "real"], &env);
    assert!(real.status.success(), "{}", String::from_utf8_lossy(&real.stderr));
    let report: serde_json::Value = serde_json::from_slice(&real.stdout).unwrap();
    assert_eq!(report["status"], 0);
    assert!(tmp.path().join("real/data/out/summary.txt").exists());
}

#[test]
fn container_exit_status_propagates() {
    let tmp = tempfile::tempdir().unwrap();
    let engine = StubEngine::new(tmp.path());
    let project = tmp.path().join("status");
    write(&project, "kerblam.toml", "");
    write(&project, "src/workflows/fail.sh", "exit 3\n");
    write(&project, "src/dockerfiles/fail.dockerfile", PIPELINE_RECIPE);
    write(&project, "src/.keep", "");
    fs::create_dir_all(project.join("data/in")).unwrap();
    let manifest = ProjectManifest::load(&project).unwrap();
    let err = workflow::run(&manifest, Some("fail"), &quiet(&engine, true)).unwrap_err();
    assert!(matches!(err, WorkflowError::ExecutionFailed(3)));
    let image: ImageRef = "kerblam/status:fail".parse().unwrap();
    assert!(container::image_exists(&engine.handle(), &image).unwrap());
}
