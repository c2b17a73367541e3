//! Line-oriented file formats read and written by the pipeline.
//!
//! Tab-separated files skip blank lines and lines starting with `#`, so
//! exports can carry a commented header. Fields that may contain tabs or
//! newlines are backslash-escaped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use normforge_core::judgment::{TriadResponse, WordVectorTable};
use normforge_core::norms::{ElicitationRecord, Feature};
use normforge_core::sdt::{Judgment, JudgmentRecord};
use normforge_core::similarity::{Choice, DissimilarityMatrix, Triplet};
use normforge_core::{CellProvenance, ConceptId, FeatureId, NormMatrix};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &str = "normmatrix";
pub const MATRIX_VERSION: &str = "v1";

pub const JUDGMENTS_HEADER: &str = "#participant\tconcept\tfeature\tresponse";
pub const RESPONSES_HEADER: &str = "#participant\ttriplet_id\tchoice";
pub const TRIPLETS_HEADER: &str = "#target\toptA\toptB\tscore\tpredA_space\tpredB_space";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

/// Non-blank, non-comment lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn fields<'a>(path: &Path, line: usize, l: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = l.split('\t').collect();
    if f.len() != n {
        return Err(Error::parse(
            path,
            line,
            format!("expected {n} tab-separated fields, found {}", f.len()),
        ));
    }
    Ok(f)
}

fn unescape_at(path: &Path, line: usize, s: &str) -> Result<String> {
    unescape_field(s).ok_or_else(|| Error::parse(path, line, format!("bad escape in {s:?}")))
}

// ---------------------------------------------------------------- elicitation

/// Reads `participant<TAB>concept<TAB>phrase` records.
pub fn load_elicitation(path: &Path) -> Result<Vec<ElicitationRecord>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let f = fields(path, line, l, 3)?;
        let (participant, concept, phrase) = (f[0].trim(), f[1].trim(), f[2].trim());
        for (name, v) in [("participant", participant), ("concept", concept), ("phrase", phrase)] {
            if v.is_empty() {
                return Err(Error::parse(path, line, format!("empty {name}")));
            }
        }
        out.push(ElicitationRecord {
            line,
            participant: participant.to_string(),
            concept: concept.to_string(),
            phrase: phrase.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Corrupt {
            path: path.into(),
            message: "no elicitation records".into(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- matrix

fn prov_code(p: CellProvenance) -> char {
    match p {
        CellProvenance::HumanElicited => 'H',
        CellProvenance::AiImputed => 'A',
        CellProvenance::Absent => '-',
    }
}

pub fn matrix_to_string(m: &NormMatrix) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{MATRIX_MAGIC} {MATRIX_VERSION} {} {}",
        m.n_concepts(),
        m.n_features()
    );
    for c in m.concepts() {
        let _ = writeln!(s, "{}\t{}", c.id.0, escape_field(&c.label));
    }
    for f in m.features() {
        let _ = write!(s, "{}\t{}", f.id.0, escape_field(&f.phrase));
        for member in &f.members {
            let _ = write!(s, "\t{}", escape_field(member));
        }
        s.push('\n');
    }
    let mut n = 0usize;
    for (c, f, p) in m.cells() {
        let _ = writeln!(s, "{}\t{}\t{}", c.0, f.0, prov_code(p));
        n += 1;
    }
    let _ = writeln!(s, "end\t{n}");
    s
}

pub fn save_matrix(m: &NormMatrix, path: &Path) -> Result<()> {
    write_atomic(path, matrix_to_string(m).as_bytes())
}

pub fn load_matrix(path: &Path) -> Result<NormMatrix> {
    parse_matrix(&read_text(path)?, path)
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<NormMatrix> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.into(),
        message,
    };
    if !text.ends_with('\n') {
        return Err(corrupt("file does not end with a complete line".into()));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| corrupt("empty file".into()))?;
    let h: Vec<&str> = header.split(' ').collect();
    if h.first() != Some(&MATRIX_MAGIC) {
        return Err(corrupt("missing normmatrix header".into()));
    }
    if h.get(1) != Some(&MATRIX_VERSION) {
        return Err(Error::Version {
            path: path.into(),
            found: h.get(1).unwrap_or(&"").to_string(),
            expected: MATRIX_VERSION,
        });
    }
    let count = |i: usize| -> Result<usize> {
        h.get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "bad header counts"))
    };
    if h.len() != 4 {
        return Err(Error::parse(path, 1, "bad header"));
    }
    let (nc, nf) = (count(2)?, count(3)?);

    let mut labels = Vec::with_capacity(nc);
    for i in 0..nc {
        let (line, l) = lines
            .next()
            .ok_or_else(|| corrupt(format!("truncated concept table at entry {i}")))?;
        let f = fields(path, line, l, 2)?;
        if f[0].parse::<usize>().ok() != Some(i) {
            return Err(Error::parse(path, line, format!("expected concept id {i}")));
        }
        labels.push(unescape_at(path, line, f[1])?);
    }
    let mut features = Vec::with_capacity(nf);
    for j in 0..nf {
        let (line, l) = lines
            .next()
            .ok_or_else(|| corrupt(format!("truncated feature table at entry {j}")))?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() < 3 {
            return Err(Error::parse(path, line, "feature needs id, phrase and members"));
        }
        if f[0].parse::<usize>().ok() != Some(j) {
            return Err(Error::parse(path, line, format!("expected feature id {j}")));
        }
        let members = f[2..]
            .iter()
            .map(|m| unescape_at(path, line, m))
            .collect::<Result<Vec<_>>>()?;
        features.push(Feature {
            id: FeatureId(j as u32),
            phrase: unescape_at(path, line, f[1])?,
            members,
        });
    }
    let mut cells = Vec::new();
    let mut trailer = None;
    for (line, l) in lines.by_ref() {
        let f: Vec<&str> = l.split('\t').collect();
        if f[0] == "end" {
            if f.len() != 2 {
                return Err(Error::parse(path, line, "bad trailer"));
            }
            trailer = Some((line, f[1].parse::<usize>().ok()));
            break;
        }
        if f.len() != 3 {
            return Err(Error::parse(path, line, "cell needs concept, feature and provenance"));
        }
        let c: u32 = f[0]
            .parse()
            .map_err(|_| Error::parse(path, line, "bad concept id"))?;
        let j: u32 = f[1]
            .parse()
            .map_err(|_| Error::parse(path, line, "bad feature id"))?;
        let p = match f[2] {
            "H" => CellProvenance::HumanElicited,
            "A" => CellProvenance::AiImputed,
            other => {
                return Err(Error::parse(path, line, format!("bad provenance {other:?}")))
            }
        };
        if c as usize >= nc || j as usize >= nf {
            return Err(Error::parse(path, line, "cell id out of range"));
        }
        cells.push(((ConceptId(c), FeatureId(j)), p));
    }
    match trailer {
        None => return Err(corrupt("missing end record (truncated?)".into())),
        Some((line, n)) => {
            if n != Some(cells.len()) {
                return Err(Error::parse(path, line, "cell count does not match trailer"));
            }
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(Error::parse(path, line, "data after end record"));
    }
    NormMatrix::new(labels, features, cells).map_err(Error::from)
}

// ---------------------------------------------------------------- judgments

pub fn judgment_str(j: Judgment) -> &'static str {
    match j {
        Judgment::True => "true",
        Judgment::False => "false",
        Judgment::Skipped => "skip",
    }
}

pub fn parse_judgment(s: &str) -> Option<Judgment> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" => Some(Judgment::True),
        "false" => Some(Judgment::False),
        "skip" => Some(Judgment::Skipped),
        _ => None,
    }
}

/// Reads `participant<TAB>concept<TAB>feature<TAB>{true|false|skip}`,
/// resolving labels against `m` (features by canonical phrase or member).
pub fn load_judgments(path: &Path, m: &NormMatrix) -> Result<Vec<JudgmentRecord>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let f = fields(path, line, l, 4)?;
        let concept_id = m
            .find_concept(f[1])
            .ok_or_else(|| Error::parse(path, line, format!("unknown concept {:?}", f[1])))?;
        let feature_id = m
            .find_feature(f[2].trim())
            .ok_or_else(|| Error::parse(path, line, format!("unknown feature {:?}", f[2])))?;
        let response = parse_judgment(f[3])
            .ok_or_else(|| Error::parse(path, line, format!("bad response {:?}", f[3])))?;
        out.push(JudgmentRecord {
            participant: f[0].trim().to_string(),
            concept_id,
            feature_id,
            response,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- word vectors

/// Reads the text format `count dim` followed by `word v1 .. vD` lines.
pub fn load_word_vectors(path: &Path) -> Result<WordVectorTable> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|v| v.parse().ok())
        .collect::<Option<Vec<_>>>()
        .filter(|h| h.len() == 2)
        .ok_or_else(|| Error::parse(path, 1, "header must be `count dimension`"))?;
    let (count, dim) = (h[0], h[1]);
    let mut table = WordVectorTable::new(dim);
    let mut seen = 0usize;
    for (line, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let mut parts = l.split_whitespace();
        let word = parts.next().expect("non-empty line");
        let values = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, line, "non-numeric vector entry"))?;
        if values.len() != dim {
            return Err(Error::parse(
                path,
                line,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        table
            .insert(word.to_string(), values)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        seen += 1;
    }
    if seen != count {
        return Err(Error::parse(
            path,
            1,
            format!("header declares {count} words, file has {seen}"),
        ));
    }
    Ok(table)
}

// ---------------------------------------------------------------- triplets

pub fn triplets_to_string(triplets: &[Triplet], labels: &[String]) -> String {
    let mut s = String::new();
    s.push_str(TRIPLETS_HEADER);
    s.push('\n');
    for t in triplets {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            escape_field(&labels[t.target.index()]),
            escape_field(&labels[t.opt_a.index()]),
            escape_field(&labels[t.opt_b.index()]),
            t.score,
            t.space_choosing(Choice::A).unwrap_or("-"),
            t.space_choosing(Choice::B).unwrap_or("-"),
        );
    }
    s
}

pub fn load_triplets(path: &Path, labels: &[String]) -> Result<Vec<Triplet>> {
    let text = read_text(path)?;
    let index: BTreeMap<&str, u32> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i as u32))
        .collect();
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let f = fields(path, line, l, 6)?;
        let id = |s: &str| -> Result<ConceptId> {
            let s = unescape_at(path, line, s)?;
            index
                .get(s.as_str())
                .map(|&i| ConceptId(i))
                .ok_or_else(|| Error::parse(path, line, format!("unknown concept {s:?}")))
        };
        let score: f64 = f[3]
            .parse()
            .map_err(|_| Error::parse(path, line, "bad score"))?;
        let mut pred_by_space = BTreeMap::new();
        for (name, choice) in [(f[4], Choice::A), (f[5], Choice::B)] {
            if name != "-" {
                pred_by_space.insert(name.to_string(), choice);
            }
        }
        out.push(Triplet {
            target: id(f[0])?,
            opt_a: id(f[1])?,
            opt_b: id(f[2])?,
            pred_by_space,
            score,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- responses

pub fn parse_choice(s: &str) -> Option<Choice> {
    match s.trim() {
        "A" | "a" => Some(Choice::A),
        "B" | "b" => Some(Choice::B),
        _ => None,
    }
}

/// Reads `participant<TAB>triplet_id<TAB>{A|B}`; ids must be below
/// `n_triplets`.
pub fn load_responses(path: &Path, n_triplets: usize) -> Result<Vec<TriadResponse>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let f = fields(path, line, l, 3)?;
        let triplet: usize = f[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, "bad triplet id"))?;
        if triplet >= n_triplets {
            return Err(Error::parse(
                path,
                line,
                format!("triplet id {triplet} out of range ({n_triplets} triplets)"),
            ));
        }
        let choice = parse_choice(f[2])
            .ok_or_else(|| Error::parse(path, line, format!("bad choice {:?}", f[2])))?;
        out.push(TriadResponse {
            participant: f[0].trim().to_string(),
            triplet,
            choice,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- CSV

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(path, line, e.to_string())
}

pub fn dissim_to_csv(d: &DissimilarityMatrix) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend(d.labels().iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(Path::new("<memory>"), e))?;
    for (i, l) in d.labels().iter().enumerate() {
        let mut rec = vec![l.clone()];
        rec.extend(d.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(Path::new("<memory>"), e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Protocol(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn load_dissim_csv(path: &Path) -> Result<DissimilarityMatrix> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let labels: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let n = labels.len();
    let mut d = Vec::with_capacity(n * n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.get(0) != labels.get(i).map(String::as_str) {
            return Err(Error::parse(path, i + 2, "row label does not match header"));
        }
        for v in rec.iter().skip(1) {
            d.push(
                v.parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 2, format!("bad value {v:?}")))?,
            );
        }
    }
    if d.len() != n * n {
        return Err(Error::Corrupt {
            path: path.into(),
            message: format!("expected {n}x{n} values"),
        });
    }
    Ok(DissimilarityMatrix::from_rows(labels, d)?)
}

pub fn coords_to_csv(labels: &[String], coords: &[[f64; 2]]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["label", "x", "y"])
        .map_err(|e| csv_error(Path::new("<memory>"), e))?;
    for (l, c) in labels.iter().zip(coords) {
        w.write_record([l.clone(), c[0].to_string(), c[1].to_string()])
            .map_err(|e| csv_error(Path::new("<memory>"), e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Protocol(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
