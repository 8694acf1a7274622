//! Tab-separated text formats.
//!
//! * rankings: `query_id<TAB>rank<TAB>item_id<TAB>score`
//! * candidates: `query_id<TAB>item_id`
//! * judgments: `query_id<TAB>item_id<TAB>grade`

use std::path::Path;

use crate::error::{Error, Result};

/// Formats like C's `%.6g`: six significant digits, trailing zeros
/// dropped, scientific notation outside `[1e-4, 1e6)`.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_owned());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}

pub fn ranking_line(query_id: &str, rank: usize, item_id: &str, score: f64) -> String {
    format!("{query_id}\t{rank}\t{item_id}\t{}\n", fmt_sig6(score))
}

/// One query's parsed ranking, items in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingRows {
    pub query_id: String,
    pub items: Vec<(String, f64)>,
}

struct Lines<'a> {
    path: String,
    text: &'a str,
}

impl<'a> Lines<'a> {
    /// Non-empty lines with the byte offset at which each starts.
    fn iter(&self) -> impl Iterator<Item = (u64, &'a str)> + 'a {
        let mut offset = 0u64;
        self.text.split_inclusive('\n').filter_map(move |raw| {
            let at = offset;
            offset += raw.len() as u64;
            let line = raw.trim_end_matches(['\n', '\r']);
            (!line.is_empty()).then_some((at, line))
        })
    }

    fn fields(&self, at: u64, line: &'a str, n: usize, what: &str) -> Result<Vec<&'a str>> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != n {
            return Err(Error::format(
                self.path.clone(),
                at,
                format!("{n} tab-separated fields ({what}), found {}", f.len()),
            ));
        }
        Ok(f)
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        Error::format(
            path.display().to_string(),
            e.utf8_error().valid_up_to() as u64,
            "UTF-8 text",
        )
    })
}

/// Groups ranking lines by query (in order of first appearance) and orders
/// each group by rank.
pub fn parse_rankings(path: &str, text: &str) -> Result<Vec<RankingRows>> {
    let lines = Lines {
        path: path.to_owned(),
        text,
    };
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<(usize, String, f64)>> =
        std::collections::HashMap::new();
    for (at, line) in lines.iter() {
        let f = lines.fields(at, line, 4, "query_id, rank, item_id, score")?;
        let rank: usize = f[1]
            .parse()
            .map_err(|_| Error::format(path, at, "integer rank in field 2"))?;
        let score: f64 = f[3]
            .parse()
            .map_err(|_| Error::format(path, at, "numeric score in field 4"))?;
        let g = groups.entry(f[0].to_owned()).or_insert_with(|| {
            order.push(f[0].to_owned());
            Vec::new()
        });
        g.push((rank, f[2].to_owned(), score));
    }
    Ok(order
        .into_iter()
        .map(|q| {
            let mut g = groups.remove(&q).unwrap_or_default();
            g.sort_by_key(|(r, _, _)| *r);
            RankingRows {
                query_id: q,
                items: g.into_iter().map(|(_, i, s)| (i, s)).collect(),
            }
        })
        .collect())
}

pub fn read_rankings(path: &Path) -> Result<Vec<RankingRows>> {
    parse_rankings(&path.display().to_string(), &read_text(path)?)
}

/// Candidate lists per query, in order of first appearance.
pub fn parse_candidates(path: &str, text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let lines = Lines {
        path: path.to_owned(),
        text,
    };
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    let mut slot: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (at, line) in lines.iter() {
        let f = lines.fields(at, line, 2, "query_id, item_id")?;
        let i = *slot.entry(f[0].to_owned()).or_insert_with(|| {
            out.push((f[0].to_owned(), Vec::new()));
            out.len() - 1
        });
        out[i].1.push(f[1].to_owned());
    }
    Ok(out)
}

pub fn read_candidates(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    parse_candidates(&path.display().to_string(), &read_text(path)?)
}

pub fn parse_judgments(path: &str, text: &str) -> Result<Vec<(String, String, f64)>> {
    let lines = Lines {
        path: path.to_owned(),
        text,
    };
    let mut out = Vec::new();
    for (at, line) in lines.iter() {
        let f = lines.fields(at, line, 3, "query_id, item_id, grade")?;
        let grade: f64 = f[2]
            .parse()
            .ok()
            .filter(|g: &f64| g.is_finite() && *g >= 0.0)
            .ok_or_else(|| Error::format(path, at, "non-negative grade in field 3"))?;
        out.push((f[0].to_owned(), f[1].to_owned(), grade));
    }
    Ok(out)
}

pub fn read_judgments(path: &Path) -> Result<Vec<(String, String, f64)>> {
    parse_judgments(&path.display().to_string(), &read_text(path)?)
}
