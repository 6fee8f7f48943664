use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, DomainId, Window};
use crate::error::{data_err, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADS1";
const VERSION: u16 = 1;

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| data_err(format!("{what} {v} does not fit the dataset format")))
}

/// Binary dataset file. Domain tags are not part of the format and read
/// back as `d<id>`.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let n = u32::try_from(dataset.len()).map_err(|_| data_err("too many windows"))?;
    w.write_all(&n.to_le_bytes())?;
    for (v, what) in [
        (dataset.channels, "channel count"),
        (dataset.timesteps, "timestep count"),
        (dataset.n_domains(), "domain count"),
        (dataset.n_classes, "class count"),
    ] {
        w.write_all(&u16_field(v, what)?.to_le_bytes())?;
    }
    for win in &dataset.windows {
        let label: i16 = match win.label {
            Some(l) => i16::try_from(l).map_err(|_| data_err(format!("label {l} does not fit the dataset format")))?,
            None => -1,
        };
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&u16_field(win.domain, "domain")?.to_le_bytes())?;
        for v in win.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    if &take::<4>(&mut r)? != MAGIC {
        return Err(data_err("not a dataset file (bad magic, expected ADS1)"));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(data_err(format!("unsupported dataset version {version}")));
    }
    let n = u32::from_le_bytes(take(&mut r)?) as usize;
    let channels = u16::from_le_bytes(take(&mut r)?) as usize;
    let timesteps = u16::from_le_bytes(take(&mut r)?) as usize;
    let n_domains = u16::from_le_bytes(take(&mut r)?) as usize;
    let n_classes = u16::from_le_bytes(take(&mut r)?) as usize;
    let mut raw = vec![0u8; channels * timesteps * 4];
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        let label = i16::from_le_bytes(take(&mut r)?);
        let domain = u16::from_le_bytes(take(&mut r)?) as usize;
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(data_err(format!("invalid label {l}"))),
        };
        windows.push(Window::new(Tensor::new(vec![channels, timesteps], data)?, label, domain));
    }
    Dataset::new(windows, channels, timesteps, default_domains(n_domains), n_classes)
}

fn default_domains(n: usize) -> Vec<DomainId> {
    (0..n).map(|id| DomainId { id, tag: format!("d{id}") }).collect()
}

/// Small fixtures: a header `domain,label,c0t0,c0t1,...` and one window per
/// row, channel-major. An empty label or `-1` marks an unlabeled window.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(data_err("csv header must start with `domain,label,c0t0`"));
    }
    let mut cells = Vec::new();
    for name in header.iter().skip(2) {
        let parsed = name
            .strip_prefix('c')
            .and_then(|s| s.split_once('t'))
            .and_then(|(c, t)| Some((c.parse::<usize>().ok()?, t.parse::<usize>().ok()?)));
        cells.push(parsed.ok_or_else(|| data_err(format!("bad csv column `{name}`, expected c<channel>t<step>")))?);
    }
    let channels = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let timesteps = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let expected: Vec<(usize, usize)> = (0..channels).flat_map(|c| (0..timesteps).map(move |t| (c, t))).collect();
    if cells != expected {
        return Err(data_err("csv value columns must be c0t0..c0tT, c1t0.. in channel-major order"));
    }
    let mut windows = Vec::new();
    let (mut n_domains, mut n_classes) = (0, 0);
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| data_err(format!("csv row {}: bad {what}", row + 1));
        let domain: usize = record[0].trim().parse().map_err(|_| bad("domain"))?;
        let label = match record[1].trim() {
            "" | "-1" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad("label"))?),
        };
        let values = record
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f32>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        n_domains = n_domains.max(domain + 1);
        if let Some(l) = label {
            n_classes = n_classes.max(l + 1);
        }
        windows.push(Window::new(Tensor::new(vec![channels, timesteps], values)?, label, domain));
    }
    Dataset::new(windows, channels, timesteps, default_domains(n_domains), n_classes)
}
