//! Case file formats: native JSON and a MATPOWER subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use pmuvsi_core::netmodel::{Branch, BranchStatus, Bus, BusId, BusKind, NetworkCase};

use crate::error::{HarnessError, Result};

/// IEEE 30-bus system as distributed with MATPOWER (`case_ieee30.m`).
pub const IEEE30_MATPOWER: &str = include_str!("../data/case_ieee30.m");
/// Three-bus complete graph with identical branches.
pub const THREE_BUS_JSON: &str = include_str!("../data/three_bus.json");

pub fn ieee30() -> NetworkCase {
    parse_matpower(IEEE30_MATPOWER).expect("bundled case parses")
}

pub fn three_bus() -> NetworkCase {
    serde_json::from_str(THREE_BUS_JSON).expect("bundled case parses")
}

/// Load a case, choosing the format by extension (`.m` or `.json`).
pub fn load_case(path: &Path) -> Result<NetworkCase> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("m") => parse_matpower(&text),
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => Err(HarnessError::Config(format!(
            "unrecognised case extension for {}; expected .m or .json",
            path.display()
        ))),
    }
}

pub fn write_case_json(case: &NetworkCase, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(case)?;
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Rows of the `mpc.<name> = [ ... ];` matrix.
fn matrix(text: &str, name: &str) -> Result<Vec<Vec<f64>>> {
    let key = format!("mpc.{name}");
    let start = text
        .find(&format!("{key} ="))
        .or_else(|| text.find(&format!("{key}=")))
        .ok_or_else(|| HarnessError::parse(0, format!("missing {key}")))?;
    let line_of = |offset: usize| text[..offset].lines().count();
    let open = start + text[start..].find('[').ok_or_else(|| HarnessError::parse(line_of(start), "expected '['"))?;
    let close = open + text[open..].find(']').ok_or_else(|| HarnessError::parse(line_of(open), "unterminated matrix"))?;
    let first_line = line_of(open);
    let mut rows = Vec::new();
    for (k, raw) in text[open + 1..close].lines().enumerate() {
        let body = raw.split('%').next().unwrap_or("");
        for chunk in body.split(';') {
            let chunk = chunk.trim();
            if chunk.is_empty() {
                continue;
            }
            let row = chunk
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| HarnessError::parse(first_line + k, format!("bad number '{s}' in {key}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn scalar(text: &str, name: &str) -> Result<f64> {
    let key = format!("mpc.{name}");
    let at = text.find(&key).ok_or_else(|| HarnessError::parse(0, format!("missing {key}")))?;
    let rest = &text[at + key.len()..];
    let value = rest
        .trim_start()
        .strip_prefix('=')
        .and_then(|r| r.split(';').next())
        .map(str::trim)
        .ok_or_else(|| HarnessError::parse(text[..at].lines().count(), format!("malformed {key}")))?;
    value
        .parse()
        .map_err(|_| HarnessError::parse(text[..at].lines().count(), format!("bad {key} value '{value}'")))
}

fn column(row: &[f64], i: usize, table: &str) -> Result<f64> {
    row.get(i)
        .copied()
        .ok_or_else(|| HarnessError::parse(0, format!("{table} row has {} columns, need {}", row.len(), i + 1)))
}

fn bus_id(x: f64) -> Result<BusId> {
    if x >= 1.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
        Ok(BusId(x as u32))
    } else {
        Err(HarnessError::parse(0, format!("bus number {x} is not a positive integer")))
    }
}

#[derive(Default)]
struct GenTotals {
    p: f64,
    q: f64,
    q_min: f64,
    q_max: f64,
    v_set: Option<f64>,
}

/// Build a case from MATPOWER `baseMVA`, `bus`, `gen` and `branch` tables.
///
/// Powers are converted to per unit on `baseMVA`. Generators out of
/// service are ignored; a PV bus without an online generator becomes PQ,
/// and isolated buses (type 4) are rejected.
pub fn parse_matpower(text: &str) -> Result<NetworkCase> {
    let base = scalar(text, "baseMVA")?;
    let bus_rows = matrix(text, "bus")?;
    let gen_rows = matrix(text, "gen")?;
    let branch_rows = matrix(text, "branch")?;

    let mut gens: BTreeMap<BusId, GenTotals> = BTreeMap::new();
    for row in &gen_rows {
        if column(row, 7, "gen")? <= 0.0 {
            continue;
        }
        let g = gens.entry(bus_id(column(row, 0, "gen")?)?).or_default();
        g.p += column(row, 1, "gen")? / base;
        g.q += column(row, 2, "gen")? / base;
        g.q_max += column(row, 3, "gen")? / base;
        g.q_min += column(row, 4, "gen")? / base;
        g.v_set.get_or_insert(column(row, 5, "gen")?);
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in &bus_rows {
        let id = bus_id(column(row, 0, "bus")?)?;
        let gen = gens.get(&id);
        let kind = match (column(row, 1, "bus")? as i64, gen) {
            (3, _) => BusKind::Slack,
            (2, Some(_)) => BusKind::PV,
            (1, _) | (2, None) => BusKind::PQ,
            (t, _) => {
                return Err(HarnessError::parse(0, format!("bus {id}: unsupported bus type {t}")));
            }
        };
        let (p_gen, q_gen) = gen.map_or((0.0, 0.0), |g| (g.p, g.q));
        let regulated = kind != BusKind::PQ;
        buses.push(Bus {
            id,
            kind,
            p_inj: p_gen - column(row, 2, "bus")? / base,
            q_inj: q_gen - column(row, 3, "bus")? / base,
            v_spec: if regulated {
                gen.and_then(|g| g.v_set).unwrap_or(column(row, 7, "bus")?)
            } else {
                0.0
            },
            shunt_g: column(row, 4, "bus")? / base,
            shunt_b: column(row, 5, "bus")? / base,
            p_gen,
            q_gen,
            q_min: gen.filter(|_| kind == BusKind::PV).map(|g| g.q_min),
            q_max: gen.filter(|_| kind == BusKind::PV).map(|g| g.q_max),
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in &branch_rows {
        let (r, x) = (column(row, 2, "branch")?, column(row, 3, "branch")?);
        if r == 0.0 && x == 0.0 {
            return Err(HarnessError::parse(0, "branch with zero impedance"));
        }
        branches.push(Branch {
            from: bus_id(column(row, 0, "branch")?)?,
            to: bus_id(column(row, 1, "branch")?)?,
            series_admittance: Complex64::new(1.0, 0.0) / Complex64::new(r, x),
            charging_b: column(row, 4, "branch")?,
            tap: column(row, 8, "branch")?,
            shift_deg: column(row, 9, "branch")?,
            status: if column(row, 10, "branch")? > 0.0 {
                BranchStatus::InService
            } else {
                BranchStatus::Outaged
            },
        });
    }
    Ok(NetworkCase::new(buses, branches, base)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ieee30_shape() {
        let case = ieee30();
        assert_eq!(case.len(), 30);
        assert_eq!(case.branches().len(), 41);
        assert_eq!(case.base_mva(), 100.0);
        let b30 = case.bus(BusId(30)).unwrap();
        assert_eq!(b30.kind, BusKind::PQ);
        assert!((b30.p_inj + 0.106).abs() < 1e-15);
        assert!((b30.q_inj + 0.019).abs() < 1e-15);
        let b2 = case.bus(BusId(2)).unwrap();
        assert_eq!(b2.kind, BusKind::PV);
        assert_eq!(b2.v_spec, 1.045);
        assert_eq!((b2.q_min, b2.q_max), (Some(-0.4), Some(0.5)));
        assert!((case.bus(BusId(10)).unwrap().shunt_b - 0.19).abs() < 1e-15);
        let slack = &case.buses()[case.slack_index()];
        assert_eq!((slack.id, slack.v_spec), (BusId(1), 1.06));
    }

    #[test]
    fn matpower_inline_rows_and_errors() {
        let text = "mpc.baseMVA = 10;\nmpc.bus = [1 3 0 0 0 0 1 1 0 1 1 1 1; 2 1 5 1 0 0 1 1 0 1 1 1 1];\n\
                    mpc.gen = [1 0 0 0 0 1.02 10 1 0 0];\nmpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1 -360 360];\n";
        let case = parse_matpower(text).unwrap();
        assert_eq!(case.buses()[1].p_inj, -0.5);
        assert_eq!(case.buses()[0].v_spec, 1.02);
        let bad = text.replace("0.1 0", "x 0");
        assert!(matches!(parse_matpower(&bad), Err(HarnessError::Parse { .. })));
        let missing = text.replace("mpc.gen", "mpc.gone");
        assert!(parse_matpower(&missing).is_err());
    }

    #[test]
    fn json_round_trip() {
        let case = ieee30();
        let text = serde_json::to_string(&case).unwrap();
        let back: NetworkCase = serde_json::from_str(&text).unwrap();
        assert_eq!(back, case);
        assert_eq!(three_bus().len(), 3);
    }
}
