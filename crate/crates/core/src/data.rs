//! Return panels: CSV ingestion, standardization and wide-format output.
//!
//! Two on-disk layouts are accepted, both UTF-8 CSV with `.` decimals:
//!
//! * wide: header `date,<id1>,...,<idN>`, one row per date;
//! * long: header `date,asset,return[,sector]`, one row per cell.
//!
//! Sector codes can also come from an `asset,sector_code` sidecar file.
//! Dates are opaque labels compared as strings, so they must sort
//! lexicographically in time order (ISO dates do).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A T×N panel of returns with its metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    returns: DMatrix<f64>,
    dates: Vec<String>,
    asset_ids: Vec<String>,
    sector_codes: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelFormat {
    Long,
    Wide,
}

impl std::str::FromStr for PanelFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(PanelFormat::Long),
            "wide" => Ok(PanelFormat::Wide),
            other => Err(Error::Config(format!("unknown panel format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Largest fraction of dates an asset may miss. Dates with any missing
    /// cell are dropped when this is positive.
    pub max_missing_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_missing_fraction: 0.0,
        }
    }
}

impl ReturnPanel {
    pub fn new(
        returns: DMatrix<f64>,
        dates: Vec<String>,
        asset_ids: Vec<String>,
        sector_codes: Option<Vec<i64>>,
    ) -> Result<Self> {
        let (t, n) = returns.shape();
        if t < 2 || n < 2 {
            return Err(Error::Dimension(format!(
                "a panel needs at least 2 dates and 2 assets, got {t}x{n}"
            )));
        }
        if dates.len() != t || asset_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{t}x{n} returns with {} dates and {} asset ids",
                dates.len(),
                asset_ids.len()
            )));
        }
        let sector_codes = sector_codes.unwrap_or_else(|| vec![0; n]);
        if sector_codes.len() != n {
            return Err(Error::Dimension(format!(
                "{} sector codes for {n} assets",
                sector_codes.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::parse(
                "dates",
                format!("dates must be strictly increasing: `{}` then `{}`", w[0], w[1]),
            ));
        }
        if returns.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse("returns", "non-finite return value"));
        }
        Ok(ReturnPanel {
            returns,
            dates,
            asset_ids,
            sector_codes,
        })
    }

    /// Panel with synthetic labels `t000000..` and `a0000..`.
    pub fn from_matrix(returns: DMatrix<f64>) -> Result<Self> {
        let dates = (0..returns.nrows()).map(|t| format!("t{t:06}")).collect();
        let ids = (0..returns.ncols()).map(|i| format!("a{i:04}")).collect();
        Self::new(returns, dates, ids, None)
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn sector_codes(&self) -> &[i64] {
        &self.sector_codes
    }

    pub fn n_dates(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    /// Rows `start..end` as a new panel.
    pub fn slice_dates(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_dates() {
            return Err(Error::Dimension(format!(
                "date range {start}..{end} outside 0..{}",
                self.n_dates()
            )));
        }
        let returns = self.returns.rows(start, end - start).into_owned();
        Self::new(
            returns,
            self.dates[start..end].to_vec(),
            self.asset_ids.clone(),
            Some(self.sector_codes.clone()),
        )
    }

    /// Replaces sector codes using an `asset,sector_code` map; unknown assets keep theirs.
    pub fn with_sectors(mut self, sectors: &HashMap<String, i64>) -> Self {
        for (id, code) in self.asset_ids.iter().zip(self.sector_codes.iter_mut()) {
            if let Some(c) = sectors.get(id) {
                *code = *c;
            }
        }
        self
    }
}

/// Demeans each column and scales it to unit population variance.
pub fn standardize(panel: &ReturnPanel) -> Result<ReturnPanel> {
    let mut r = panel.returns.clone();
    let t = r.nrows() as f64;
    for (j, mut col) in r.column_iter_mut().enumerate() {
        let mean = col.sum() / t;
        col.iter_mut().for_each(|x| *x -= mean);
        let var = col.iter().map(|x| x * x).sum::<f64>() / t;
        let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if var <= 0.0 || scale == 0.0 || var.sqrt() <= 1e-14 * (mean.abs() + scale) {
            return Err(Error::DegenerateColumn { column: j });
        }
        let sd = var.sqrt();
        col.iter_mut().for_each(|x| *x /= sd);
    }
    Ok(ReturnPanel {
        returns: r,
        dates: panel.dates.clone(),
        asset_ids: panel.asset_ids.clone(),
        sector_codes: panel.sector_codes.clone(),
    })
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_f64(field: &str, location: impl FnOnce() -> String) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::parse(location(), format!("`{field}` is not a number")))
}

/// Reads a panel from disk. Missing cells are allowed only up to
/// `opts.max_missing_fraction` per asset, and the affected dates are dropped.
pub fn load_panel(path: &Path, format: PanelFormat, opts: LoadOptions) -> Result<ReturnPanel> {
    let (dates, ids, sectors, cells) = match format {
        PanelFormat::Wide => read_wide(path)?,
        PanelFormat::Long => read_long(path)?,
    };
    assemble(path, dates, ids, sectors, cells, opts)
}

type Cells = Vec<Vec<Option<f64>>>;

fn read_wide(path: &Path) -> Result<(Vec<String>, Vec<String>, Option<Vec<i64>>, Cells)> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "date" {
        return Err(Error::parse(
            format!("{}:1", path.display()),
            "wide header must be `date,<id1>,...`",
        ));
    }
    let ids: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut seen = HashMap::new();
    for id in &ids {
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::Duplicate {
                date: "<header>".into(),
                asset: id.clone(),
            });
        }
    }
    let mut dates = Vec::new();
    let mut cells = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != ids.len() + 1 {
            return Err(Error::parse(
                format!("{}:{line}", path.display()),
                format!("expected {} fields, found {}", ids.len() + 1, rec.len()),
            ));
        }
        dates.push(rec[0].to_owned());
        let mut values = Vec::with_capacity(ids.len());
        for field in rec.iter().skip(1) {
            if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                values.push(None);
            } else {
                values.push(Some(parse_f64(field, || {
                    format!("{}:{line}", path.display())
                })?));
            }
        }
        cells.push(values);
    }
    let mut sorted = dates.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Duplicate {
            date: w[0].clone(),
            asset: "<row>".into(),
        });
    }
    Ok((dates, ids, None, cells))
}

fn read_long(path: &Path) -> Result<(Vec<String>, Vec<String>, Option<Vec<i64>>, Cells)> {
    let mut rdr = open(path)?;
    let headers = rdr.headers()?.clone();
    let has_sector = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["date", "asset", "return"] => false,
        ["date", "asset", "return", "sector"] => true,
        _ => {
            return Err(Error::parse(
                format!("{}:1", path.display()),
                "long header must be `date,asset,return[,sector]`",
            ))
        }
    };
    let mut ids: Vec<String> = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut sectors: Vec<i64> = Vec::new();
    let mut by_date: BTreeMap<String, HashMap<usize, f64>> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let loc = || format!("{}:{line}", path.display());
        let expected = if has_sector { 4 } else { 3 };
        if rec.len() != expected {
            return Err(Error::parse(
                loc(),
                format!("expected {expected} fields, found {}", rec.len()),
            ));
        }
        let date = rec[0].to_owned();
        let asset = rec[1].to_owned();
        let value = parse_f64(&rec[2], loc)?;
        let idx = *id_index.entry(asset.clone()).or_insert_with(|| {
            ids.push(asset.clone());
            sectors.push(0);
            ids.len() - 1
        });
        if has_sector {
            sectors[idx] = rec[3]
                .parse::<i64>()
                .map_err(|_| Error::parse(loc(), format!("bad sector code `{}`", &rec[3])))?;
        }
        if by_date
            .entry(date.clone())
            .or_default()
            .insert(idx, value)
            .is_some()
        {
            return Err(Error::Duplicate { date, asset });
        }
    }
    let n = ids.len();
    let dates: Vec<String> = by_date.keys().cloned().collect();
    let cells = by_date
        .values()
        .map(|row| (0..n).map(|j| row.get(&j).copied()).collect())
        .collect();
    Ok((dates, ids, has_sector.then_some(sectors), cells))
}

fn assemble(
    path: &Path,
    dates: Vec<String>,
    ids: Vec<String>,
    sectors: Option<Vec<i64>>,
    cells: Cells,
    opts: LoadOptions,
) -> Result<ReturnPanel> {
    let t = dates.len();
    let n = ids.len();
    for (j, id) in ids.iter().enumerate() {
        let missing = cells.iter().filter(|row| row[j].is_none()).count();
        if missing as f64 > opts.max_missing_fraction * t as f64 {
            return Err(Error::Coverage {
                asset: id.clone(),
                missing,
                total: t,
                allowed: opts.max_missing_fraction,
            });
        }
    }
    let keep: Vec<usize> = (0..t)
        .filter(|&r| cells[r].iter().all(Option::is_some))
        .collect();
    if keep.len() < t {
        log::info!(
            "{}: dropped {} dates with missing cells",
            path.display(),
            t - keep.len()
        );
    }
    let returns = DMatrix::from_fn(keep.len(), n, |r, c| cells[keep[r]][c].unwrap_or(f64::NAN));
    let dates = keep.iter().map(|&r| dates[r].clone()).collect();
    ReturnPanel::new(returns, dates, ids, sectors)
}

/// Reads an `asset,sector_code` sidecar.
pub fn load_sectors(path: &Path) -> Result<HashMap<String, i64>> {
    let mut rdr = open(path)?;
    let mut out = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let loc = format!("{}:{}", path.display(), row + 2);
        if rec.len() != 2 {
            return Err(Error::parse(loc, "expected `asset,sector_code`"));
        }
        let code = rec[1]
            .parse::<i64>()
            .map_err(|_| Error::parse(loc, format!("bad sector code `{}`", &rec[1])))?;
        out.insert(rec[0].to_owned(), code);
    }
    Ok(out)
}

/// Formats a value with shortest round-trip representation, or in scientific
/// notation with `precision` fractional digits.
pub(crate) fn fmt_value(v: f64, precision: Option<usize>) -> String {
    match precision {
        None => format!("{v}"),
        Some(p) => format!("{v:.p$e}"),
    }
}

/// Writes a T×K matrix as wide CSV with a leading `date` column.
pub fn write_dated_matrix(
    path: &Path,
    dates: &[String],
    header: &[String],
    values: &DMatrix<f64>,
    precision: Option<usize>,
) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 12);
    out.push_str("date");
    for h in header {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for (t, date) in dates.iter().enumerate() {
        out.push_str(date);
        for j in 0..values.ncols() {
            out.push(',');
            out.push_str(&fmt_value(values[(t, j)], precision));
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the panel in wide format. With `precision = None` every value is
/// written in shortest round-trip form, so reloading is bit-exact.
pub fn write_wide(panel: &ReturnPanel, path: &Path, precision: Option<usize>) -> Result<()> {
    write_dated_matrix(path, &panel.dates, &panel.asset_ids, &panel.returns, precision)
}

/// Writes the `asset,sector_code` sidecar for a panel.
pub fn write_sectors(panel: &ReturnPanel, path: &Path) -> Result<()> {
    let mut out = String::from("asset,sector_code\n");
    for (id, code) in panel.asset_ids.iter().zip(&panel.sector_codes) {
        out.push_str(&format!("{id},{code}\n"));
    }
    write_file(path, out.as_bytes())
}
