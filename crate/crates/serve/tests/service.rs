use std::net::SocketAddr;
use std::path::PathBuf;

use base64::Engine;
use ndarray::Array2;
use serde_json::{json, Value};
use sherrylab::datamodel::write_toy_images;
use sherrylab::retrieval::extract_index;
use sherrylab::*;
use sherrylab_serve::{start, RetrieveResponse, RunningService, ServeError, ServiceState};

struct Fixture {
    _dir: tempfile::TempDir,
    checkpoint: PathBuf,
    gallery: PathBuf,
    manifest: PathBuf,
    photos: Vec<(String, PathBuf)>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_dataset(&ToySpec { feature_dim: 48, per_class_per_domain: 6, seed: 9, ..Default::default() }).unwrap();
    let images = write_toy_images(&toy, &dir.path().join("data"), (4, 4)).unwrap();
    let manifest = sherrylab::datamodel::write_manifest(&images, &dir.path().join("data")).unwrap();
    let images = load_manifest(&manifest).unwrap();

    let names: Vec<String> = toy.prototypes.iter().map(|(n, _)| n.clone()).collect();
    let m = Array2::from_shape_fn((names.len(), 48), |(i, j)| toy.prototypes[i].1[j]);
    let bank = TextBank::from_vectors("toy", &names, m.view()).unwrap();
    let init = build_encoder(&EncoderSpec::stage_conv((4, 4, 3), vec![8, 8], 16, 8), 9).unwrap();
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-2, augmentation: false, seed: 9, ..Default::default() };
    let ckpt = train(&cfg, &init, &images, &bank).unwrap();
    let checkpoint = dir.path().join("ckpt");
    ckpt.save(&checkpoint).unwrap();

    let photos: Vec<&Sample> = images.test_by_domain(Domain::Photo);
    let gallery = dir.path().join("gallery");
    extract_index(&ckpt.encoder, &photos).unwrap().save(&gallery).unwrap();
    let photos = photos.iter().map(|s| (s.id.clone(), s.source_path().unwrap().to_path_buf())).collect();
    Fixture { _dir: dir, checkpoint, gallery, manifest, photos }
}

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn serve(f: &Fixture) -> RunningService {
    start(ServiceState::load(&f.checkpoint, &f.gallery, Some(&f.manifest)).unwrap(), local()).unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn b64(path: &PathBuf) -> String {
    base64::engine::general_purpose::STANDARD.encode(std::fs::read(path).unwrap())
}

fn post(svc: &RunningService, body: Value) -> (u16, Value) {
    let mut resp = agent().post(format!("{}/v1/retrieve", svc.url())).send_json(&body).unwrap();
    (resp.status().as_u16(), resp.body_mut().read_json().unwrap())
}

#[test]
fn health_and_classes_describe_the_artifacts() {
    let f = fixture();
    let svc = serve(&f);
    let mut resp = agent().get(format!("{}/v1/health", svc.url())).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let body: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["gallery_size"], 24);
    assert_eq!(body["checkpoint"], Checkpoint::encoder_hash(&f.checkpoint).unwrap());

    let body: Value = agent().get(format!("{}/v1/classes", svc.url())).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(body["classes"], json!(["unseen_00", "unseen_01", "unseen_02", "unseen_03"]));
}

#[test]
fn startup_rejects_bad_artifacts() {
    let f = fixture();
    let state = ServiceState::load(&f.checkpoint, &f.gallery, None).unwrap();
    let wrong = FeatureIndex::from_features(vec!["x".into()], vec!["c".into()], &Array2::ones((1, 5)), Domain::Photo).unwrap();
    assert!(matches!(
        ServiceState::new(state.student.clone(), wrong, String::new()),
        Err(ServeError::ArtifactMismatch(_))
    ));
    let sketches = FeatureIndex { domain: Domain::Sketch, ..state.gallery.clone() };
    assert!(matches!(ServiceState::new(state.student.clone(), sketches, String::new()), Err(ServeError::ArtifactMismatch(_))));

    let svc = start(state, local()).unwrap();
    let again = ServiceState::load(&f.checkpoint, &f.gallery, None).unwrap();
    match start(again, svc.addr) {
        Err(ServeError::PortUnavailable { port, .. }) => assert_eq!(port, svc.addr.port()),
        Err(other) => panic!("expected PortUnavailable, got {other}"),
        Ok(_) => panic!("second bind on a live port succeeded"),
    }
}

#[test]
fn gallery_photos_retrieve_themselves_first() {
    let f = fixture();
    let svc = serve(&f);
    for (id, path) in &f.photos {
        let (status, body) = post(&svc, json!({"image": b64(path), "k": 5}));
        assert_eq!(status, 200);
        let r: RetrieveResponse = serde_json::from_value(body).unwrap();
        assert_eq!(r.results.len(), 5);
        assert_eq!(&r.results[0].id, id);
        assert_eq!(r.results[0].score, 1.0);
        assert_eq!(r.results[0].thumbnail_url, format!("/v1/thumbnail/{id}"));
        assert!(r.results.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(r.latency_ms >= 0.0);
    }
}

#[test]
fn request_validation() {
    let f = fixture();
    let svc = serve(&f);
    let img = b64(&f.photos[0].1);
    let (status, body) = post(&svc, json!({"image": img, "k": 1}));
    assert_eq!(status, 200);
    assert_eq!(body["results"].as_array().unwrap().len(), 1);
    let (status, _) = post(&svc, json!({"image": format!("data:image/png;base64,{img}"), "k": 24}));
    assert_eq!(status, 200);

    for k in [0, 25, -3] {
        let (status, body) = post(&svc, json!({"image": img, "k": k}));
        assert_eq!(status, 422, "k={k}");
        assert_eq!(body["error"], "BadK");
    }
    let (status, body) = post(&svc, json!({"image": "%%%not base64", "k": 1}));
    assert_eq!((status, body["error"].as_str().unwrap()), (400, "BadImage"));
    let garbage = base64::engine::general_purpose::STANDARD.encode(b"definitely not a png");
    let (status, body) = post(&svc, json!({"image": garbage, "k": 1}));
    assert_eq!((status, body["error"].as_str().unwrap()), (400, "BadImage"));
    let (status, _) = post(&svc, json!({"k": 1}));
    assert_eq!(status, 400);
}

#[test]
fn responses_are_stateless_under_concurrency() {
    let f = fixture();
    let svc = serve(&f);
    let img = b64(&f.photos[3].1);
    let (_, first) = post(&svc, json!({"image": img, "k": 10}));
    let (_, second) = post(&svc, json!({"image": img, "k": 10}));
    assert_eq!(first["results"], second["results"]);

    let url = svc.url();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (url, img) = (url.clone(), img.clone());
            std::thread::spawn(move || {
                let mut resp = agent().post(format!("{url}/v1/retrieve")).send_json(json!({"image": img, "k": 10})).unwrap();
                resp.body_mut().read_json::<Value>().unwrap()["results"].clone()
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), first["results"]);
    }
}

#[test]
fn thumbnails_and_cors() {
    let f = fixture();
    let svc = serve(&f);
    let (id, path) = &f.photos[2];
    let mut resp = agent().get(format!("{}/v1/thumbnail/{id}", svc.url())).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(resp.body_mut().read_to_vec().unwrap(), std::fs::read(path).unwrap());
    let resp = agent().get(format!("{}/v1/thumbnail/nope", svc.url())).call().unwrap();
    assert_eq!(resp.status().as_u16(), 404);

    let resp = agent().get(format!("{}/v1/health", svc.url())).header("Origin", "http://localhost:5173").call().unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
