//! Tile acquisition: a cached static-map HTTP client, a synthetic offline
//! provider, and dataset assembly.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use image::{imageops, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{CellId, GeoError, GridSpec, LatLon, TileGeometry};
use crate::labeling::{Label, LabeledCell};

pub const DEFAULT_WORKERS: usize = 8;
pub const DEFAULT_MAX_FAILURE_FRACTION: f64 = 0.01;
const REQUIRED_PLACEHOLDERS: [&str; 4] = ["{lat}", "{lon}", "{zoom}", "{size}"];
const KEY_PLACEHOLDER: &str = "{key}";

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("provider config: {0}")]
    Config(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("fetch failed for {url}: {detail}")]
    Fetch {
        url: String,
        status: Option<u16>,
        detail: String,
    },
    #[error("provider returned {got_w}x{got_h} for a {want}x{want} request")]
    ProviderMismatch { want: u32, got_w: u32, got_h: u32 },
    #[error("cannot decode tile image: {0}")]
    Decode(String),
    #[error("no label for cell {0}")]
    MissingLabel(CellId),
    #[error("{failed} of {total} tiles failed, above the {threshold} failure threshold")]
    TooManyFailures {
        failed: usize,
        total: usize,
        threshold: f64,
    },
    #[error("malformed manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ImageryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileSource {
    Remote,
    Cache,
    Synthetic,
}

/// Square RGB tile, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pixels: Vec<u8>,
    geometry: TileGeometry,
    source: TileSource,
}

impl ImageTile {
    pub fn new(pixels: Vec<u8>, geometry: TileGeometry, source: TileSource) -> Result<Self> {
        let side = geometry.size_px as usize;
        if pixels.len() != side * side * 3 {
            return Err(ImageryError::Decode(format!(
                "pixel buffer of {} bytes for a {side}x{side} tile",
                pixels.len()
            )));
        }
        Ok(ImageTile {
            pixels,
            geometry,
            source,
        })
    }

    fn from_image(img: RgbImage, geometry: TileGeometry, source: TileSource) -> Result<Self> {
        let want = geometry.size_px;
        if img.width() != want || img.height() != want {
            return Err(ImageryError::ProviderMismatch {
                want,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
        ImageTile::new(img.into_raw(), geometry, source)
    }

    /// Decodes any supported raster and checks it against the requested geometry.
    pub fn decode(bytes: &[u8], geometry: TileGeometry, source: TileSource) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| ImageryError::Decode(e.to_string()))?;
        ImageTile::from_image(img.to_rgb8(), geometry, source)
    }

    pub fn load_png(path: &Path, geometry: TileGeometry, source: TileSource) -> Result<Self> {
        ImageTile::decode(&fs::read(path)?, geometry, source)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn geometry(&self) -> &TileGeometry {
        &self.geometry
    }

    pub fn source(&self) -> TileSource {
        self.source
    }

    pub fn size(&self) -> u32 {
        self.geometry.size_px
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.size(), self.size(), self.pixels.clone()).expect("length checked at construction")
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = io::Cursor::new(Vec::new());
        self.to_image()
            .write_to(&mut out, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        out.into_inner()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_png())
    }

    /// Mean of each channel over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = (self.pixels.len() / 3).max(1) as f64;
        sums.map(|s| s as f64 / n)
    }
}

/// Bilinear downscale to `side`×`side`, then channel-major floats `v/255 - 0.5`.
pub fn tile_to_input(tile: &ImageTile, side: usize) -> Vec<f32> {
    let img = tile.to_image();
    let resized = if img.width() as usize == side && img.height() as usize == side {
        img
    } else {
        imageops::resize(&img, side as u32, side as u32, imageops::FilterType::Triangle)
    };
    let plane = side * side;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px.0[c] as f32 / 255.0 - 0.5;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Endpoint with `{lat}`, `{lon}`, `{zoom}`, `{size}` and optionally `{key}`.
    pub url_template: String,
    /// Name of the environment variable holding the API key. The key itself is
    /// never stored.
    pub api_key_env: Option<String>,
    pub cache_dir: PathBuf,
    /// Requests per second across all workers.
    pub rate_limit: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            url_template: String::new(),
            api_key_env: None,
            cache_dir: PathBuf::from("tile_cache"),
            rate_limit: 5.0,
            retries: 3,
            backoff_ms: 500,
            timeout_s: 30,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        let missing: Vec<&str> = REQUIRED_PLACEHOLDERS
            .iter()
            .copied()
            .filter(|p| !self.url_template.contains(p))
            .collect();
        if !missing.is_empty() {
            return Err(ImageryError::Config(format!(
                "url_template lacks {}",
                missing.join(", ")
            )));
        }
        if self.url_template.contains(KEY_PLACEHOLDER) && self.api_key_env.is_none() {
            return Err(ImageryError::Config(
                "url_template uses {key} but api_key_env is not set".into(),
            ));
        }
        if !(self.rate_limit.is_finite() && self.rate_limit > 0.0) {
            return Err(ImageryError::Config(format!("rate_limit must be positive, got {}", self.rate_limit)));
        }
        if self.timeout_s == 0 {
            return Err(ImageryError::Config("timeout_s must be positive".into()));
        }
        Ok(())
    }

    fn api_key(&self) -> Result<Option<String>> {
        if !self.url_template.contains(KEY_PLACEHOLDER) {
            return Ok(None);
        }
        let var = self
            .api_key_env
            .as_deref()
            .ok_or_else(|| ImageryError::Config("url_template uses {key} but api_key_env is not set".into()))?;
        match std::env::var(var) {
            Ok(k) if !k.is_empty() => Ok(Some(k)),
            _ => Err(ImageryError::MissingKey(var.to_string())),
        }
    }
}

pub fn format_coord(v: f64) -> String {
    format!("{v:.7}")
}

fn substitute(template: &str, geom: &TileGeometry, key: &str) -> String {
    template
        .replace("{lat}", &format_coord(geom.center.lat))
        .replace("{lon}", &format_coord(geom.center.lon))
        .replace("{zoom}", &geom.zoom.to_string())
        .replace("{size}", &geom.size_px.to_string())
        .replace(KEY_PLACEHOLDER, key)
}

/// Request URL for a tile. Includes the API key when the template asks for it.
pub fn tile_request_url(geom: &TileGeometry, cfg: &ProviderConfig) -> Result<String> {
    cfg.validate()?;
    let key = cfg.api_key()?;
    Ok(substitute(&cfg.url_template, geom, key.as_deref().unwrap_or("")))
}

/// The request URL with the key masked, for logs and error messages.
pub fn redacted_url(geom: &TileGeometry, cfg: &ProviderConfig) -> String {
    substitute(&cfg.url_template, geom, "REDACTED")
}

/// `cache_dir/{zoom}/{lat}_{lon}_{size}.png`, coordinates at 7 decimals.
pub fn cache_path(cache_dir: &Path, geom: &TileGeometry) -> PathBuf {
    cache_dir.join(geom.zoom.to_string()).join(format!(
        "{}_{}_{}.png",
        format_coord(geom.center.lat),
        format_coord(geom.center.lon),
        geom.size_px
    ))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Anything that can produce the tile for a grid cell.
pub trait TileProvider: Sync {
    fn tile(&self, cell: CellId, geom: &TileGeometry) -> Result<ImageTile>;
}

/// Spaces request starts at least `1/rate` seconds apart across all callers.
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rate: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rate),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = next.map_or(now, |t| t.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

/// Static-map HTTP client with an on-disk cache.
pub struct RemoteProvider {
    cfg: ProviderConfig,
    key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
    in_flight: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
    requests: AtomicUsize,
}

impl RemoteProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let key = cfg.api_key()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| ImageryError::Config(format!("HTTP client: {e}")))?;
        Ok(RemoteProvider {
            limiter: RateLimiter::new(cfg.rate_limit),
            cfg,
            key,
            client,
            in_flight: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        })
    }

    /// HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn fetch_tile(&self, geom: &TileGeometry) -> Result<ImageTile> {
        geom.validate()?;
        let path = cache_path(&self.cfg.cache_dir, geom);
        let gate = {
            let mut map = self.in_flight.lock().unwrap();
            map.entry(path.clone()).or_default().clone()
        };
        let result = {
            let _held = gate.lock().unwrap();
            self.fetch_locked(geom, &path)
        };
        let mut map = self.in_flight.lock().unwrap();
        if Arc::strong_count(&gate) == 2 {
            map.remove(&path);
        }
        result
    }

    fn fetch_locked(&self, geom: &TileGeometry, path: &Path) -> Result<ImageTile> {
        if path.exists() {
            match ImageTile::load_png(path, *geom, TileSource::Cache) {
                Ok(tile) => return Ok(tile),
                Err(e) => log::warn!("discarding unreadable cache entry {}: {e}", path.display()),
            }
        }
        let bytes = self.download(geom)?;
        let tile = ImageTile::decode(&bytes, *geom, TileSource::Remote)?;
        tile.save_png(path)?;
        Ok(tile)
    }

    fn download(&self, geom: &TileGeometry) -> Result<Vec<u8>> {
        let url = substitute(&self.cfg.url_template, geom, self.key.as_deref().unwrap_or(""));
        let shown = redacted_url(geom, &self.cfg);
        let mut attempt = 0;
        loop {
            self.limiter.acquire();
            self.requests.fetch_add(1, Ordering::SeqCst);
            let (status, detail) = match self.client.get(&url).send() {
                Ok(resp) if resp.status().is_success() => match resp.bytes() {
                    Ok(b) => return Ok(b.to_vec()),
                    Err(e) => (None, without_url(e)),
                },
                Ok(resp) => (Some(resp.status().as_u16()), format!("HTTP {}", resp.status())),
                Err(e) => (None, without_url(e)),
            };
            let retryable = status.is_none_or(|s| s == 429 || s >= 500);
            if !retryable || attempt >= self.cfg.retries {
                return Err(ImageryError::Fetch {
                    url: shown,
                    status,
                    detail,
                });
            }
            let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
            log::debug!("retrying {shown} in {wait} ms after: {detail}");
            std::thread::sleep(Duration::from_millis(wait));
            attempt += 1;
        }
    }
}

/// Strips the request URL from a transport error so a key never leaks.
fn without_url(e: reqwest::Error) -> String {
    e.without_url().to_string()
}

impl TileProvider for RemoteProvider {
    fn tile(&self, _cell: CellId, geom: &TileGeometry) -> Result<ImageTile> {
        self.fetch_tile(geom)
    }
}

/// Built-up share of the ground cover drawn for each label.
pub fn urban_level(label: Label) -> f64 {
    match label {
        Label::Low => 0.15,
        Label::Neutral => 0.5,
        Label::High => 0.85,
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Synthetic ground cover for one tile. `urban` in [0, 1] moves the scene from
/// vegetation blobs with a few rooftops to gray pavement crossed by roads.
pub fn synth_texture(urban: f64, side: u32, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = side as usize;
    let f = side as f64 / 256.0;
    let u = (urban + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| a + (b - a) * u;
    let shade = rng.random_range(-12.0..12.0);
    let base = [lerp(70.0, 128.0) + shade, lerp(112.0, 126.0) + shade, lerp(52.0, 120.0) + shade];
    let mut img = vec![[0f64; 3]; s * s];
    img.iter_mut().for_each(|p| *p = base);

    let disc = |img: &mut [[f64; 3]], cx: f64, cy: f64, r: f64, color: [f64; 3]| {
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(s));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(s));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    img[y * s + x] = color;
                }
            }
        }
    };
    let trees = ((1.0 - u) * 26.0 * rng.random_range(0.7..1.3)).round() as usize;
    for _ in 0..trees {
        let (cx, cy) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
        let r = rng.random_range(6.0..20.0) * f;
        let g = rng.random_range(85.0..130.0);
        disc(&mut img, cx, cy, r, [g * 0.35, g, g * 0.3]);
    }

    let fill = |img: &mut [[f64; 3]], x0: f64, y0: f64, w: f64, h: f64, color: [f64; 3]| {
        let xs = (x0.max(0.0) as usize, ((x0 + w) as usize).min(s));
        let ys = (y0.max(0.0) as usize, ((y0 + h) as usize).min(s));
        for y in ys.0..ys.1 {
            for x in xs.0..xs.1 {
                img[y * s + x] = color;
            }
        }
    };
    let roofs = (2.0 + u * 14.0 * rng.random_range(0.7..1.3)).round() as usize;
    for _ in 0..roofs {
        let (w, h) = (rng.random_range(10.0..36.0) * f, rng.random_range(10.0..36.0) * f);
        let (x0, y0) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
        let tone = rng.random_range(90.0..200.0);
        let warm = rng.random_range(0.0..30.0);
        fill(&mut img, x0, y0, w, h, [tone + warm, tone, tone - warm]);
    }

    let roads = (u * 7.0 * rng.random_range(0.7..1.3)).round() as usize;
    for _ in 0..roads {
        let width = rng.random_range(4.0..10.0) * f;
        let at = rng.random_range(0.0..side as f64);
        let tone = rng.random_range(55.0..85.0);
        if rng.random_bool(0.5) {
            fill(&mut img, 0.0, at, side as f64, width, [tone; 3]);
        } else {
            fill(&mut img, at, 0.0, width, side as f64, [tone; 3]);
        }
    }

    let noise = Normal::new(0.0, 10.0).expect("valid sigma");
    let mut out = Vec::with_capacity(s * s * 3);
    for p in &img {
        for c in p {
            out.push((c + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Deterministic label-correlated tile for a cell.
pub fn synth_tile(cell: CellId, label: Label, seed: u64, geom: &TileGeometry) -> ImageTile {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, cell.row as u64, cell.col as u64, label.index() as u64]));
    let pixels = synth_texture(urban_level(label), geom.size_px, &mut rng);
    ImageTile::new(pixels, *geom, TileSource::Synthetic).expect("synthetic buffer has the requested size")
}

/// Offline provider drawing each cell from its known label.
pub struct SyntheticProvider {
    labels: HashMap<CellId, Label>,
    seed: u64,
}

impl SyntheticProvider {
    pub fn new(labels: impl IntoIterator<Item = (CellId, Label)>, seed: u64) -> Self {
        SyntheticProvider {
            labels: labels.into_iter().collect(),
            seed,
        }
    }

    pub fn from_cells(cells: &[LabeledCell], seed: u64) -> Self {
        SyntheticProvider::new(cells.iter().map(|c| (c.cell, c.label)), seed)
    }
}

impl TileProvider for SyntheticProvider {
    fn tile(&self, cell: CellId, geom: &TileGeometry) -> Result<ImageTile> {
        let label = *self.labels.get(&cell).ok_or(ImageryError::MissingLabel(cell))?;
        Ok(synth_tile(cell, label, self.seed, geom))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub cell: CellId,
    pub center: LatLon,
    pub zoom: u8,
    pub label: Label,
    /// Tile path relative to the manifest's directory.
    pub path: PathBuf,
}

/// One tab-separated line per tile: cell id, lat, lon, zoom, label, path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.cell,
                format_coord(e.center.lat),
                format_coord(e.center.lon),
                e.zoom,
                e.label,
                e.path.to_string_lossy().replace('\\', "/")
            )?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| ImageryError::Manifest { line: i + 1, detail };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            entries.push(ManifestEntry {
                cell: f[0].parse().map_err(|e: GeoError| bad(e.to_string()))?,
                center: LatLon {
                    lat: num(f[1])?,
                    lon: num(f[2])?,
                },
                zoom: f[3].parse().map_err(|_| bad(format!("bad zoom {:?}", f[3])))?,
                label: f[4].parse().map_err(|_| bad(format!("bad label {:?}", f[4])))?,
                path: PathBuf::from(f[5]),
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        DatasetManifest::read_tsv(io::BufReader::new(fs::File::open(path)?))
    }
}

#[derive(Debug)]
pub struct DatasetBuild {
    pub manifest: DatasetManifest,
    pub failures: Vec<(CellId, String)>,
}

/// Runs `f` over `items` on a pool of at most `workers` threads, keeping order.
pub fn run_pooled<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Fetches one tile per labeled cell, centered on the cell, into
/// `out_dir/tiles/r{row}c{col}.png`, and writes `out_dir/manifest.tsv`.
pub fn build_dataset(
    cells: &[LabeledCell],
    provider: &dyn TileProvider,
    grid: &GridSpec,
    geom: &TileGeometry,
    out_dir: &Path,
    workers: usize,
    max_failure_fraction: f64,
) -> Result<DatasetBuild> {
    let mut sorted = cells.to_vec();
    sorted.sort_by_key(|c| (c.cell.row, c.cell.col));
    let tiles_dir = out_dir.join("tiles");
    fs::create_dir_all(&tiles_dir)?;
    let results = run_pooled(workers, &sorted, |c| -> Result<ManifestEntry> {
        let center = grid.cell_center(c.cell)?;
        let g = geom.with_center(center);
        let tile = provider.tile(c.cell, &g)?;
        let rel = PathBuf::from("tiles").join(format!("{}.png", c.cell));
        tile.save_png(&out_dir.join(&rel))?;
        Ok(ManifestEntry {
            cell: c.cell,
            center,
            zoom: g.zoom,
            label: c.label,
            path: rel,
        })
    });
    let mut manifest = DatasetManifest::default();
    let mut failures = Vec::new();
    for (c, r) in sorted.iter().zip(results) {
        match r {
            Ok(e) => manifest.entries.push(e),
            Err(e) => {
                log::warn!("tile for {} failed: {e}", c.cell);
                failures.push((c.cell, e.to_string()));
            }
        }
    }
    check_failures(failures.len(), sorted.len(), max_failure_fraction)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    if !failures.is_empty() {
        let mut buf = String::new();
        for (cell, msg) in &failures {
            buf.push_str(&format!("{cell}\t{msg}\n"));
        }
        write_atomic(&out_dir.join("failures.tsv"), buf.as_bytes())?;
    }
    Ok(DatasetBuild { manifest, failures })
}

pub fn check_failures(failed: usize, total: usize, threshold: f64) -> Result<()> {
    if total > 0 && failed as f64 / total as f64 > threshold {
        return Err(ImageryError::TooManyFailures {
            failed,
            total,
            threshold,
        });
    }
    Ok(())
}

/// Loads every manifest tile as classifier input of the given side.
pub fn load_examples(manifest: &DatasetManifest, root: &Path, size_px: u32, side: usize) -> Result<Vec<crimemap_nn::Example>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let geom = TileGeometry::new(e.center, e.zoom, size_px)?;
            let tile = ImageTile::load_png(&root.join(&e.path), geom, TileSource::Cache)?;
            Ok(crimemap_nn::Example {
                input: tile_to_input(&tile, side),
                label: e.label.index(),
            })
        })
        .collect()
}
