//! Remote tile client against a local stub server.

#[path = "support/stub_server.rs"]
mod stub_server;

use std::sync::Once;
use std::time::Instant;

use crimemap_core::geo::{GridSpec, LatLon, TileGeometry};
use crimemap_core::imagery::{
    build_dataset, cache_path, run_pooled, ImageTile, ImageryError, ProviderConfig, RemoteProvider, TileSource,
};
use crimemap_core::labeling::{Label, LabeledCell};
use stub_server::{Response, StubServer};

const SIZE: u32 = 32;
const KEY_VAR: &str = "CRIMEMAP_STUB_TILE_KEY";
const KEY: &str = "sk-stub-5ecret-9f31";

fn set_key() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| std::env::set_var(KEY_VAR, KEY));
}

fn png(side: u32) -> Vec<u8> {
    let geom = TileGeometry::new(LatLon { lat: 0.0, lon: 0.0 }, 17, side).unwrap();
    let pixels = (0..side * side * 3).map(|i| (i % 251) as u8).collect();
    ImageTile::new(pixels, geom, TileSource::Remote).unwrap().encode_png()
}

fn ok_png(side: u32) -> Response {
    Response { status: 200, body: png(side) }
}

fn config(server: &StubServer, cache: &std::path::Path) -> ProviderConfig {
    ProviderConfig {
        url_template: format!("{}/tile?c={{lat}},{{lon}}&z={{zoom}}&s={{size}}", server.base),
        cache_dir: cache.to_path_buf(),
        rate_limit: 200.0,
        retries: 3,
        backoff_ms: 5,
        timeout_s: 5,
        ..ProviderConfig::default()
    }
}

fn geom(i: usize) -> TileGeometry {
    TileGeometry::new(LatLon { lat: 41.8 + i as f64 * 1e-3, lon: -87.7 }, 17, SIZE).unwrap()
}

#[test]
fn warm_cache_issues_no_requests_and_reproduces_manifest() {
    let server = StubServer::start(|_, _| ok_png(SIZE));
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&server, &dir.path().join("cache"));
    let grid = GridSpec::from_corner(LatLon { lat: 41.8, lon: -87.7 }, 3, 3, 30.0).unwrap();
    let cells: Vec<LabeledCell> = grid
        .cells()
        .map(|cell| LabeledCell { cell, score: 0, label: Label::ALL[cell.col % 3] })
        .collect();
    let g = geom(0);

    let cold = RemoteProvider::new(cfg.clone()).unwrap();
    let a = dir.path().join("a");
    build_dataset(&cells, &cold, &grid, &g, &a, 3, 0.0).unwrap();
    assert_eq!(cold.request_count(), cells.len());
    assert_eq!(server.count(), cells.len());

    let warm = RemoteProvider::new(cfg).unwrap();
    let b = dir.path().join("b");
    build_dataset(&cells, &warm, &grid, &g, &b, 3, 0.0).unwrap();
    assert_eq!(warm.request_count(), 0);
    assert_eq!(server.count(), cells.len());
    let read = |d: &std::path::Path| std::fs::read(d.join("manifest.tsv")).unwrap();
    assert_eq!(read(&a), read(&b));
    for cell in grid.cells() {
        let rel = format!("tiles/{cell}.png");
        assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap());
    }
}

#[test]
fn request_rate_stays_under_limit() {
    let server = StubServer::start(|_, _| ok_png(SIZE));
    let dir = tempfile::tempdir().unwrap();
    let cfg = ProviderConfig { rate_limit: 10.0, ..config(&server, dir.path()) };
    let provider = RemoteProvider::new(cfg).unwrap();
    let geoms: Vec<TileGeometry> = (0..12).map(geom).collect();
    run_pooled(4, &geoms, |g| provider.fetch_tile(g).unwrap());
    let times: Vec<Instant> = server.requests().iter().map(|(t, _)| *t).collect();
    assert_eq!(times.len(), 12);
    let span = (*times.iter().max().unwrap() - *times.iter().min().unwrap()).as_secs_f64();
    let rate = (times.len() - 1) as f64 / span;
    assert!(rate <= 11.0, "observed {rate:.2} requests/s against a limit of 10");
}

#[test]
fn transient_errors_are_retried() {
    let server = StubServer::start(|_, nth| if nth < 2 { Response { status: 503, body: vec![] } } else { ok_png(SIZE) });
    let dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::new(config(&server, dir.path())).unwrap();
    let tile = provider.fetch_tile(&geom(0)).unwrap();
    assert_eq!(tile.source(), TileSource::Remote);
    assert_eq!(server.count(), 3);
    assert_eq!(provider.fetch_tile(&geom(0)).unwrap().source(), TileSource::Cache);
    assert_eq!(server.count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(|_, _| Response { status: 404, body: vec![] });
    let dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::new(config(&server, dir.path())).unwrap();
    match provider.fetch_tile(&geom(0)) {
        Err(ImageryError::Fetch { status, .. }) => assert_eq!(status, Some(404)),
        other => panic!("expected a fetch error, got {other:?}"),
    }
    assert_eq!(server.count(), 1);
}

#[test]
fn api_key_never_appears_in_errors() {
    set_key();
    let server = StubServer::start(|path, _| {
        assert!(path.contains(KEY), "key missing from request {path}");
        Response { status: 500, body: b"upstream down".to_vec() }
    });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server, dir.path());
    cfg.url_template.push_str("&key={key}");
    cfg.api_key_env = Some(KEY_VAR.into());
    cfg.retries = 1;
    let provider = RemoteProvider::new(cfg.clone()).unwrap();
    let err = provider.fetch_tile(&geom(0)).unwrap_err();
    let text = format!("{err} {err:?}");
    assert!(!text.contains(KEY), "{text}");
    assert!(text.contains("REDACTED"), "{text}");
    assert_eq!(server.count(), 2);

    // Transport failure: nothing listens on the port any more.
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = closed.local_addr().unwrap().port();
    drop(closed);
    cfg.url_template = format!("http://127.0.0.1:{port}/t?c={{lat}},{{lon}}&z={{zoom}}&s={{size}}&key={{key}}");
    cfg.retries = 0;
    let err = RemoteProvider::new(cfg).unwrap().fetch_tile(&geom(1)).unwrap_err();
    let text = format!("{err} {err:?}");
    assert!(!text.contains(KEY), "{text}");
}

#[test]
fn missing_key_variable_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ProviderConfig {
        url_template: "http://127.0.0.1:9/{lat}/{lon}/{zoom}/{size}?k={key}".into(),
        api_key_env: Some("CRIMEMAP_STUB_UNSET_KEY".into()),
        cache_dir: dir.path().to_path_buf(),
        ..ProviderConfig::default()
    };
    assert!(matches!(RemoteProvider::new(cfg), Err(ImageryError::MissingKey(v)) if v == "CRIMEMAP_STUB_UNSET_KEY"));
}

#[test]
fn wrong_tile_size_is_rejected() {
    let server = StubServer::start(|_, _| ok_png(SIZE / 2));
    let dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::new(config(&server, dir.path())).unwrap();
    match provider.fetch_tile(&geom(0)) {
        Err(ImageryError::ProviderMismatch { want, got_w, got_h }) => {
            assert_eq!((want, got_w, got_h), (SIZE, SIZE / 2, SIZE / 2))
        }
        other => panic!("expected a size mismatch, got {other:?}"),
    }
    assert!(!cache_path(dir.path(), &geom(0)).exists());
}

#[test]
fn concurrent_requests_for_one_tile_share_a_fetch() {
    let server = StubServer::start(|_, _| {
        std::thread::sleep(std::time::Duration::from_millis(100));
        ok_png(SIZE)
    });
    let dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::new(config(&server, dir.path())).unwrap();
    let g = geom(0);
    let same = vec![g; 8];
    let tiles = run_pooled(8, &same, |g| provider.fetch_tile(g).unwrap());
    assert_eq!(server.count(), 1);
    assert_eq!(provider.request_count(), 1);
    assert!(tiles.windows(2).all(|w| w[0].pixels() == w[1].pixels()));
}

#[test]
fn distinct_cells_get_distinct_cache_entries() {
    let server = StubServer::start(|_, _| ok_png(SIZE));
    let dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::new(config(&server, dir.path())).unwrap();
    for i in 0..3 {
        provider.fetch_tile(&geom(i)).unwrap();
    }
    let cached = std::fs::read_dir(dir.path().join("17")).unwrap().count();
    assert_eq!(cached, 3);
}
