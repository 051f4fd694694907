//! CSV files: ensembles, ICDFs, coefficient matrices, CDF grids, CDR traces
//! and probe tables. Floats are written with 17 significant digits, which
//! round-trips every f64 exactly.

use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use crate::basis::CoarseState;
use crate::cdr::CdrIteration;
use crate::error::{Error, Result};
use crate::observables::{CdfGrid, IcdfSamples, Orientation};
use crate::probe::ProbeRow;
use crate::sde::ParticleEnsemble;

pub const ENSEMBLE_HEADER: [&str; 2] = ["x_cm", "y_cm"];
pub const ICDF_HEADER: [&str; 2] = ["rank", "value_cm"];
pub const TRACE_HEADER: [&str; 6] = ["iter", "A_loop", "A_cum", "std_x", "std_y", "corr"];
pub const PROBE_HEADER: [&str; 3] = ["iter", "p", "a"];
pub const CDF_GRID_CORNER: &str = "y_cm\\x_cm";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            msg: format!("{kind:?}"),
        },
    }
}

struct Rows {
    records: Vec<(usize, StringRecord)>,
}

fn read_rows(input: impl Read) -> Result<Rows> {
    let mut rdr = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        records.push((line, rec));
    }
    Ok(Rows { records })
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        msg: msg.into(),
    })
}

fn field(line: usize, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => parse_err(line, format!("non-finite value `{s}`")),
        Err(_) => parse_err(line, format!("not a number: `{s}`")),
    }
}

fn index(line: usize, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .or_else(|_| parse_err(line, format!("not a non-negative integer: `{s}`")))
}

impl Rows {
    /// Splits off the header after checking it equals `want`.
    fn expect_header(&self, want: &[&str]) -> Result<&[(usize, StringRecord)]> {
        let Some((line, head)) = self.records.first() else {
            return parse_err(1, "empty file");
        };
        if head.len() != want.len() || head.iter().zip(want).any(|(a, b)| a != *b) {
            return parse_err(
                *line,
                format!("expected header `{}`, found `{}`", want.join(","), head.iter().collect::<Vec<_>>().join(",")),
            );
        }
        Ok(&self.records[1..])
    }
}

fn numeric_rows(body: &[(usize, StringRecord)], width: usize) -> Result<Vec<Vec<f64>>> {
    body.iter()
        .map(|(line, rec)| {
            if rec.len() != width {
                return parse_err(*line, format!("expected {width} fields, found {}", rec.len()));
            }
            rec.iter().map(|s| field(*line, s)).collect()
        })
        .collect()
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    WriterBuilder::new().has_headers(false).from_writer(out)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush()?;
    Ok(())
}

pub fn write_ensemble(out: impl Write, ens: &ParticleEnsemble) -> Result<()> {
    let mut w = writer(out);
    w.write_record(ENSEMBLE_HEADER).map_err(csv_err)?;
    for (x, y) in ens.x.iter().zip(&ens.y) {
        w.write_record([fmt_f64(*x), fmt_f64(*y)]).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_ensemble(input: impl Read) -> Result<ParticleEnsemble> {
    let rows = read_rows(input)?;
    let body = numeric_rows(rows.expect_header(&ENSEMBLE_HEADER)?, 2)?;
    let (x, y) = body.into_iter().map(|r| (r[0], r[1])).unzip();
    ParticleEnsemble::new(x, y)
}

pub fn write_icdf(out: impl Write, icdf: &IcdfSamples) -> Result<()> {
    let mut w = writer(out);
    w.write_record(ICDF_HEADER).map_err(csv_err)?;
    for (f, v) in icdf.ranks().iter().zip(icdf.values()) {
        w.write_record([fmt_f64(*f), fmt_f64(*v)]).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_icdf(input: impl Read) -> Result<IcdfSamples> {
    let rows = read_rows(input)?;
    let body = numeric_rows(rows.expect_header(&ICDF_HEADER)?, 2)?;
    let (ranks, values) = body.into_iter().map(|r| (r[0], r[1])).unzip();
    IcdfSamples::new(ranks, values)
}

fn coefficient_header(order: usize) -> Vec<String> {
    std::iter::once("i".to_string())
        .chain((0..=order).map(|q| format!("q{q}")))
        .collect()
}

/// Row `i` holds ICDF `i` (0 = marginal, then the conditional bands).
pub fn write_coefficients(out: impl Write, state: &CoarseState) -> Result<()> {
    let mut w = writer(out);
    w.write_record(coefficient_header(state.order())).map_err(csv_err)?;
    for (i, row) in state.beta.iter().enumerate() {
        let rec: Vec<String> = std::iter::once(i.to_string()).chain(row.iter().map(|v| fmt_f64(*v))).collect();
        w.write_record(rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_coefficients(input: impl Read, orientation: Orientation) -> Result<CoarseState> {
    let rows = read_rows(input)?;
    let Some((line, head)) = rows.records.first() else {
        return parse_err(1, "empty file");
    };
    if head.len() < 2 {
        return parse_err(*line, "coefficient header needs `i` and at least `q0`");
    }
    let order = head.len() - 2;
    let header = coefficient_header(order);
    let body = rows.expect_header(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut beta = Vec::with_capacity(body.len());
    for (k, (line, rec)) in body.iter().enumerate() {
        if rec.len() != order + 2 {
            return parse_err(*line, format!("expected {} fields, found {}", order + 2, rec.len()));
        }
        if index(*line, &rec[0])? != k {
            return parse_err(*line, format!("ICDF index {} out of sequence, expected {k}", &rec[0]));
        }
        beta.push(rec.iter().skip(1).map(|s| field(*line, s)).collect::<Result<Vec<f64>>>()?);
    }
    CoarseState::new(beta, orientation)
}

/// First row: corner label then grid_x; each further row: grid_y value then
/// the CDF along x.
pub fn write_cdf_grid(out: impl Write, grid: &CdfGrid) -> Result<()> {
    let mut w = writer(out);
    let head: Vec<String> = std::iter::once(CDF_GRID_CORNER.to_string())
        .chain(grid.grid_x.iter().map(|v| fmt_f64(*v)))
        .collect();
    w.write_record(head).map_err(csv_err)?;
    let nx = grid.grid_x.len();
    for (r, y) in grid.grid_y.iter().enumerate() {
        let rec: Vec<String> = std::iter::once(fmt_f64(*y))
            .chain(grid.values[r * nx..(r + 1) * nx].iter().map(|v| fmt_f64(*v)))
            .collect();
        w.write_record(rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_cdf_grid(input: impl Read) -> Result<CdfGrid> {
    let rows = read_rows(input)?;
    let Some((line, head)) = rows.records.first() else {
        return parse_err(1, "empty file");
    };
    if head.len() < 2 || &head[0] != CDF_GRID_CORNER {
        return parse_err(*line, format!("expected `{CDF_GRID_CORNER}` followed by grid_x values"));
    }
    let grid_x = head.iter().skip(1).map(|s| field(*line, s)).collect::<Result<Vec<f64>>>()?;
    if grid_x.windows(2).any(|w| w[1] <= w[0]) {
        return parse_err(*line, "grid_x must be strictly increasing");
    }
    let body = numeric_rows(&rows.records[1..], grid_x.len() + 1)?;
    if body.is_empty() {
        return parse_err(*line + 1, "no grid_y rows");
    }
    let mut grid_y = Vec::with_capacity(body.len());
    let mut values = Vec::with_capacity(body.len() * grid_x.len());
    for (k, row) in body.iter().enumerate() {
        let line = rows.records[k + 1].0;
        if grid_y.last().is_some_and(|&prev| row[0] <= prev) {
            return parse_err(line, "grid_y must be strictly increasing");
        }
        if row[1..].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return parse_err(line, "CDF values must lie in [0, 1]");
        }
        if row[1..].windows(2).any(|w| w[1] < w[0]) {
            return parse_err(line, "CDF values must be non-decreasing along x");
        }
        if k > 0 && row[1..].iter().zip(&values[(k - 1) * grid_x.len()..]).any(|(v, below)| v < below) {
            return parse_err(line, "CDF values must be non-decreasing along y");
        }
        grid_y.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    Ok(CdfGrid { grid_x, grid_y, values })
}

pub fn write_trace(out: impl Write, iterations: &[CdrIteration]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for it in iterations {
        let m = &it.moments;
        let corr = m.corr.map_or_else(|| "nan".to_string(), fmt_f64);
        w.write_record([
            it.iter.to_string(),
            fmt_f64(it.a_loop),
            fmt_f64(it.a_cum),
            fmt_f64(m.std_x),
            fmt_f64(m.std_y),
            corr,
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// One parsed trace row; `corr` is `None` where the file says `nan`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub a_loop: f64,
    pub a_cum: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub corr: Option<f64>,
}

pub fn read_trace(input: impl Read) -> Result<Vec<TraceRow>> {
    let rows = read_rows(input)?;
    rows.expect_header(&TRACE_HEADER)?
        .iter()
        .map(|(line, rec)| {
            if rec.len() != TRACE_HEADER.len() {
                return parse_err(*line, format!("expected 6 fields, found {}", rec.len()));
            }
            let corr = if &rec[5] == "nan" { None } else { Some(field(*line, &rec[5])?) };
            Ok(TraceRow {
                iter: index(*line, &rec[0])?,
                a_loop: field(*line, &rec[1])?,
                a_cum: field(*line, &rec[2])?,
                std_x: field(*line, &rec[3])?,
                std_y: field(*line, &rec[4])?,
                corr,
            })
        })
        .collect()
}

pub fn write_probe(out: impl Write, rows: &[ProbeRow]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(PROBE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.iter.to_string(), fmt_f64(r.p), fmt_f64(r.a)]).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_probe(input: impl Read) -> Result<Vec<ProbeRow>> {
    let rows = read_rows(input)?;
    rows.expect_header(&PROBE_HEADER)?
        .iter()
        .map(|(line, rec)| {
            if rec.len() != 3 {
                return parse_err(*line, format!("expected 3 fields, found {}", rec.len()));
            }
            Ok(ProbeRow {
                iter: index(*line, &rec[0])?,
                p: field(*line, &rec[1])?,
                a: field(*line, &rec[2])?,
            })
        })
        .collect()
}

/// Generic numeric table with a fixed header, for auxiliary outputs
/// (per-cycle coefficients, A(t) tracking, diagonal cross-sections).
pub fn write_table(out: impl Write, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Invalid(format!("row has {} fields, header {}", r.len(), header.len())));
        }
        w.write_record(r.iter().map(|v| fmt_f64(*v))).map_err(csv_err)?;
    }
    finish(w)
}

/// Reads a table written by [`write_table`]: header names and numeric rows
/// of the same width.
pub fn read_table(input: impl Read) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let rows = read_rows(input)?;
    let Some((_, head)) = rows.records.first() else {
        return parse_err(1, "empty file");
    };
    let header: Vec<String> = head.iter().map(str::to_owned).collect();
    let body = numeric_rows(&rows.records[1..], header.len())?;
    Ok((header, body))
}
