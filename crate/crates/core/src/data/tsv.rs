//! Four-column TSV corpora: `src_lang \t tgt_lang \t src text \t tgt text`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::data::Example;
use crate::error::{Error, Result};

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let file = File::open(path)?;
    parse_tsv(BufReader::new(file))
}

/// Parses TSV rows; blank lines are skipped, any other row must have exactly
/// four tab-separated fields with non-empty language columns.
pub fn parse_tsv<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 tab-separated columns, found {}", fields.len()),
            });
        }
        let (src_lang, tgt_lang) = (fields[0].trim(), fields[1].trim());
        if src_lang.is_empty() || tgt_lang.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty language column".into(),
            });
        }
        out.push(Example {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src: fields[2].split_whitespace().map(String::from).collect(),
            tgt: fields[3].split_whitespace().map(String::from).collect(),
        });
    }
    Ok(out)
}

pub fn write_tsv<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            ex.src_lang,
            ex.tgt_lang,
            ex.src.join(" "),
            ex.tgt.join(" ")
        )?;
    }
    Ok(())
}
