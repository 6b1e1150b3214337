//! Reader for the sectioned `.case` text format (see `docs/case-format.md`).

use std::collections::HashMap;
use std::path::Path;

use super::{
    validate, Bus, ClassWeights, EssUnit, Generator, GridError, Line, LoadClass, LoadPoint,
    NetworkKind, NetworkModel, SlackRange, Units,
};

pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkModel, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_case(&text)
}

/// Parses and validates a case from its text.
pub fn parse_case(text: &str) -> Result<NetworkModel, GridError> {
    let model = parse_unvalidated(text)?;
    let report = validate(&model);
    if report.is_empty() {
        Ok(model)
    } else {
        Err(GridError::Invalid(report))
    }
}

struct Row<'a> {
    line: usize,
    fields: Vec<&'a str>,
}

#[derive(Default)]
struct Section<'a> {
    header: Vec<&'a str>,
    rows: Vec<Row<'a>>,
    pairs: Vec<(usize, &'a str, &'a str)>,
}

fn perr(line: usize, message: impl Into<String>) -> GridError {
    GridError::Parse {
        line,
        message: message.into(),
    }
}

fn split_sections(text: &str) -> Result<HashMap<&str, Section<'_>>, GridError> {
    let mut sections: HashMap<&str, Section> = HashMap::new();
    let mut current: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if sections.contains_key(name) {
                return Err(perr(lineno, format!("duplicate section [{name}]")));
            }
            sections.insert(name, Section::default());
            current = Some(name);
            continue;
        }
        let name = current.ok_or_else(|| perr(lineno, "content before the first section"))?;
        let section = sections.get_mut(name).expect("section registered");
        if name == "meta" {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(lineno, "expected `key = value` in [meta]"))?;
            section.pairs.push((lineno, k.trim(), v.trim()));
        } else {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if section.header.is_empty() {
                section.header = fields;
            } else {
                section.rows.push(Row { line: lineno, fields });
            }
        }
    }
    Ok(sections)
}

struct Table<'s, 'a> {
    name: &'static str,
    section: &'s Section<'a>,
    columns: HashMap<&'a str, usize>,
}

impl<'s, 'a> Table<'s, 'a> {
    fn new(
        sections: &'s HashMap<&str, Section<'a>>,
        name: &'static str,
        required: &[&str],
    ) -> Result<Option<Self>, GridError> {
        let Some(section) = sections.get(name) else {
            return Ok(None);
        };
        let columns: HashMap<&str, usize> = section
            .header
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i))
            .collect();
        for col in required {
            if !columns.contains_key(col) {
                return Err(perr(0, format!("[{name}] header lacks column `{col}`")));
            }
        }
        Ok(Some(Self { name, section, columns }))
    }

    fn raw(&self, row: &Row<'a>, col: &str) -> Option<&'a str> {
        self.columns
            .get(col)
            .and_then(|&i| row.fields.get(i).copied())
            .filter(|s| !s.is_empty())
    }

    fn num(&self, row: &Row<'a>, col: &str) -> Result<f64, GridError> {
        let s = self
            .raw(row, col)
            .ok_or_else(|| perr(row.line, format!("[{}] missing value for `{col}`", self.name)))?;
        s.parse()
            .map_err(|_| perr(row.line, format!("[{}] `{col}` = {s:?} is not a number", self.name)))
    }

    fn num_or(&self, row: &Row<'a>, col: &str, default: f64) -> Result<f64, GridError> {
        match self.raw(row, col) {
            None => Ok(default),
            Some(_) => self.num(row, col),
        }
    }

    fn id(&self, row: &Row<'a>, col: &str) -> Result<u32, GridError> {
        let s = self
            .raw(row, col)
            .ok_or_else(|| perr(row.line, format!("[{}] missing value for `{col}`", self.name)))?;
        s.parse()
            .map_err(|_| perr(row.line, format!("[{}] `{col}` = {s:?} is not a bus id", self.name)))
    }

    fn flag(&self, row: &Row<'a>, col: &str) -> Result<bool, GridError> {
        match self.raw(row, col) {
            None => Ok(false),
            Some(s) => parse_bool(s).ok_or_else(|| {
                perr(row.line, format!("[{}] `{col}` = {s:?} is not yes/no", self.name))
            }),
        }
    }

    fn text(&self, row: &Row<'a>, col: &str, fallback: String) -> String {
        self.raw(row, col).map(str::to_string).unwrap_or(fallback)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "yes" | "true" | "1" | "y" => Some(true),
        "no" | "false" | "0" | "n" => Some(false),
        _ => None,
    }
}

fn parse_unvalidated(text: &str) -> Result<NetworkModel, GridError> {
    let sections = split_sections(text)?;
    let meta = sections
        .get("meta")
        .ok_or_else(|| perr(0, "missing [meta] section"))?;
    let mut name = String::from("unnamed");
    let mut kind = None;
    let mut base_mva = 100.0;
    let mut horizon = 24usize;
    let mut dt = 1.0;
    let mut weights = ClassWeights::default();
    let mut line_failures = false;
    for &(line, key, value) in &meta.pairs {
        let num = || -> Result<f64, GridError> {
            value
                .parse()
                .map_err(|_| perr(line, format!("[meta] `{key}` = {value:?} is not a number")))
        };
        match key {
            "name" => name = value.to_string(),
            "kind" => {
                kind = Some(match value {
                    "dc" => NetworkKind::Dc,
                    "ac" => NetworkKind::Ac,
                    _ => return Err(perr(line, format!("[meta] unknown kind {value:?}"))),
                })
            }
            "base_mva" => base_mva = num()?,
            "horizon" => {
                horizon = value
                    .parse()
                    .map_err(|_| perr(line, "[meta] `horizon` must be a positive integer"))?
            }
            "dt_hours" => dt = num()?,
            "k_critical" => weights.critical = num()?,
            "k_semi_critical" => weights.semi_critical = num()?,
            "k_non_critical" => weights.non_critical = num()?,
            "line_failures" => {
                line_failures = parse_bool(value)
                    .ok_or_else(|| perr(line, "[meta] `line_failures` must be yes/no"))?
            }
            // Free-form provenance notes are allowed and ignored.
            "note" | "source" => {}
            _ => return Err(perr(line, format!("[meta] unknown key `{key}`"))),
        }
    }
    let kind = kind.ok_or_else(|| perr(0, "[meta] lacks `kind`"))?;

    let mut buses = Vec::new();
    if let Some(t) = Table::new(&sections, "buses", &["id", "v_min", "v_max"])? {
        for row in &t.section.rows {
            let is_slack = t.flag(row, "is_slack")?;
            let slack = if is_slack {
                Some(SlackRange {
                    p_min: t.num(row, "slack_p_min")?,
                    p_max: t.num(row, "slack_p_max")?,
                })
            } else {
                None
            };
            buses.push(Bus {
                id: t.id(row, "id")?,
                v_min: t.num(row, "v_min")?,
                v_max: t.num(row, "v_max")?,
                theta_min: t.num_or(row, "theta_min", -std::f64::consts::PI)?,
                theta_max: t.num_or(row, "theta_max", std::f64::consts::PI)?,
                b_shunt: t.num_or(row, "b_shunt", 0.0)?,
                slack,
            });
        }
    }

    let mut lines = Vec::new();
    if let Some(t) = Table::new(&sections, "lines", &["from", "to", "g", "p_lim"])? {
        for row in &t.section.rows {
            lines.push(Line {
                from_bus: t.id(row, "from")?,
                to_bus: t.id(row, "to")?,
                g: t.num(row, "g")?,
                b: t.num_or(row, "b", 0.0)?,
                b_charging: t.num_or(row, "b_charging", 0.0)?,
                p_lim: t.num(row, "p_lim")?,
                q_lim: t.num_or(row, "q_lim", 0.0)?,
                pof: t.num_or(row, "pof", 0.0)?,
                in_service: true,
            });
        }
    }

    let mut generators = Vec::new();
    if let Some(t) = Table::new(&sections, "generators", &["bus", "p_max", "pof", "k_robust"])? {
        for (i, row) in t.section.rows.iter().enumerate() {
            generators.push(Generator {
                name: t.text(row, "name", format!("G{}", i + 1)),
                bus: t.id(row, "bus")?,
                p_min: t.num_or(row, "p_min", 0.0)?,
                p_max: t.num(row, "p_max")?,
                q_min: t.num_or(row, "q_min", 0.0)?,
                q_max: t.num_or(row, "q_max", 0.0)?,
                pof: t.num(row, "pof")?,
                k_robust: t.num(row, "k_robust")?,
                in_service: true,
            });
        }
    }

    let mut ess = Vec::new();
    if let Some(t) = Table::new(
        &sections,
        "ess",
        &["bus", "capacity", "soc_min", "c_max", "d_max", "e_init"],
    )? {
        for (i, row) in t.section.rows.iter().enumerate() {
            let capacity = t.num(row, "capacity")?;
            let soc_min = t.num(row, "soc_min")?;
            let soc_max = t.num_or(row, "soc_max", 1.0)?;
            ess.push(EssUnit {
                name: t.text(row, "name", format!("ESS{}", i + 1)),
                bus: t.id(row, "bus")?,
                capacity,
                e_min: soc_min * capacity,
                e_max: soc_max * capacity,
                c_max: t.num(row, "c_max")?,
                d_max: t.num(row, "d_max")?,
                soc_min,
                soc_max,
                eta: t.num_or(row, "eta", 1.0)?,
                e_init: t.num(row, "e_init")?,
            });
        }
    }

    let mut loads: Vec<LoadPoint> = Vec::new();
    if let Some(t) = Table::new(&sections, "loads", &["name", "bus", "class", "quantity"])? {
        let first_value = t.section.header.len() - 1;
        if t.section.header.last() != Some(&"profile...") {
            return Err(perr(0, "[loads] header must end with `profile...`"));
        }
        for row in &t.section.rows {
            let name = t.text(row, "name", String::new());
            let values = row
                .fields
                .get(first_value..)
                .unwrap_or(&[])
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| perr(row.line, format!("[loads] {s:?} is not a number")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let quantity = t.raw(row, "quantity").unwrap_or("p");
            match quantity {
                "p" => {
                    let class_s = t.raw(row, "class").unwrap_or("");
                    let class = LoadClass::parse(class_s).ok_or_else(|| {
                        perr(row.line, format!("[loads] unknown class {class_s:?}"))
                    })?;
                    loads.push(LoadPoint {
                        name,
                        bus: t.id(row, "bus")?,
                        class,
                        p: values,
                        q: None,
                    });
                }
                "q" => {
                    let target = loads
                        .iter_mut()
                        .rev()
                        .find(|l| l.name == name)
                        .ok_or_else(|| {
                            perr(row.line, format!("[loads] q row for unknown load {name:?}"))
                        })?;
                    target.q = Some(values);
                }
                other => {
                    return Err(perr(row.line, format!("[loads] unknown quantity {other:?}")))
                }
            }
        }
    }

    Ok(NetworkModel {
        name,
        kind,
        units: Units::Natural,
        base_mva,
        horizon,
        dt,
        weights,
        line_failures,
        buses,
        lines,
        generators,
        ess,
        loads,
    })
}
