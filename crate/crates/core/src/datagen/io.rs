//! Plain-text dataset format.
//!
//! ```text
//! fedds v1 <clients> <dim> <classes>
//! client <id> <n_train> <n_test>
//! tr <label> <x_1> ... <x_d>
//! te <label> <x_1> ... <x_d>
//! ```
//!
//! Clients appear in id order; each block holds its `n_train` `tr` records
//! followed by its `n_test` `te` records.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Sample;

use super::{ClientData, FederatedDataset};

pub fn write_dataset<W: Write>(ds: &FederatedDataset, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "fedds v1 {} {} {}",
        ds.clients.len(),
        ds.input_dim,
        ds.class_count
    )?;
    for (id, c) in ds.clients.iter().enumerate() {
        writeln!(w, "client {id} {} {}", c.train.len(), c.test.len())?;
        for (tag, set) in [("tr", &c.train), ("te", &c.test)] {
            for s in set.iter() {
                write!(w, "{tag} {}", s.label)?;
                for x in s.features.iter() {
                    write!(w, " {x}")?;
                }
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &FederatedDataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, std::fs::File::create(path)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FederatedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_dataset(BufReader::new(file))
}

struct Cursor<R> {
    lines: std::io::Lines<R>,
    line: usize,
    record: usize,
}

impl<R: BufRead> Cursor<R> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            record: self.record,
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<Option<String>> {
        loop {
            match self.lines.next() {
                None => return Ok(None),
                Some(l) => {
                    self.line += 1;
                    let l = l?;
                    if !l.trim().is_empty() {
                        return Ok(Some(l));
                    }
                }
            }
        }
    }

    fn expect_line(&mut self, what: &str) -> Result<String> {
        self.next_line()?
            .ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))
    }
}

fn parse_num<T: std::str::FromStr>(
    tok: Option<&str>,
    what: &str,
) -> std::result::Result<T, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    tok.parse().map_err(|_| format!("invalid {what} `{tok}`"))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<FederatedDataset> {
    let mut cur = Cursor {
        lines: reader.lines(),
        line: 0,
        record: 0,
    };
    let header = cur.expect_line("header")?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("fedds") || tok.next() != Some("v1") {
        return Err(cur.err("malformed header, expected `fedds v1 <clients> <dim> <classes>`"));
    }
    let parse_header = |tok: &mut std::str::SplitWhitespace| -> std::result::Result<(usize, usize, usize), String> {
        Ok((
            parse_num(tok.next(), "client count")?,
            parse_num(tok.next(), "dimension")?,
            parse_num(tok.next(), "class count")?,
        ))
    };
    let (n_clients, dim, classes) =
        parse_header(&mut tok).map_err(|m| cur.err(format!("malformed header: {m}")))?;

    let mut clients = Vec::with_capacity(n_clients);
    for expected_id in 0..n_clients {
        let line = cur.expect_line("client block")?;
        let mut tok = line.split_whitespace();
        if tok.next() != Some("client") {
            return Err(cur.err(format!("expected `client {expected_id} ...`")));
        }
        let parsed: std::result::Result<(usize, usize, usize), String> = (|| {
            Ok((
                parse_num(tok.next(), "client id")?,
                parse_num(tok.next(), "train count")?,
                parse_num(tok.next(), "test count")?,
            ))
        })();
        let (id, n_train, n_test) = parsed.map_err(|m| cur.err(m))?;
        if id != expected_id {
            return Err(cur.err(format!("client {id} out of order, expected {expected_id}")));
        }
        if n_train == 0 {
            return Err(cur.err(format!("client has no training data (client {id})")));
        }
        let mut data = ClientData::default();
        for i in 0..n_train + n_test {
            let want = if i < n_train { "tr" } else { "te" };
            let line = cur.expect_line("sample record")?;
            let mut tok = line.split_whitespace();
            if tok.next() != Some(want) {
                return Err(cur.err(format!("expected a `{want}` record")));
            }
            let label: usize = parse_num(tok.next(), "label").map_err(|m| cur.err(m))?;
            if label >= classes {
                return Err(cur.err(format!("label {label} out of range for {classes} classes")));
            }
            let features: Vec<f64> = tok
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| format!("invalid feature `{t}`"))
                })
                .collect::<std::result::Result<_, _>>()
                .map_err(|m| cur.err(m))?;
            if features.len() != dim {
                return Err(cur.err(format!("expected {dim} features, found {}", features.len())));
            }
            let set = if i < n_train {
                &mut data.train
            } else {
                &mut data.test
            };
            let idx = set.len() as u64;
            set.push(Sample::new(features, label).with_origin(id, idx));
            cur.record += 1;
        }
        clients.push(data);
    }
    if cur.next_line()?.is_some() {
        return Err(cur.err("trailing data after the last client block"));
    }
    Ok(FederatedDataset {
        clients,
        class_count: classes,
        input_dim: dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticConfig};

    fn parse(s: &str) -> Result<FederatedDataset> {
        parse_dataset(s.as_bytes())
    }

    #[test]
    fn round_trip_of_generated_dataset() {
        let ds = generate_synthetic(&SyntheticConfig {
            client_count: 3,
            input_dim: 7,
            samples_per_client: vec![20, 11, 9],
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(parse_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn label_out_of_range_names_the_record() {
        let text = "fedds v1 1 2 3\nclient 0 2 0\ntr 1 0.5 1\ntr 3 0 0\n";
        match parse(text).unwrap_err() {
            Error::Parse {
                record,
                line,
                message,
            } => {
                assert_eq!((record, line), (1, 4));
                assert!(message.contains("label 3"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_client_is_rejected() {
        let err = parse("fedds v1 1 2 3\nclient 0 0 1\nte 1 0 0\n").unwrap_err();
        assert!(err.to_string().contains("client has no training data"));
    }

    #[test]
    fn malformed_header_and_dimension_errors() {
        assert!(parse("fedds v2 1 2 3\n")
            .unwrap_err()
            .to_string()
            .contains("malformed header"));
        assert!(parse("fedds v1 x 2 3\n")
            .unwrap_err()
            .to_string()
            .contains("malformed header"));
        let err = parse("fedds v1 1 2 3\nclient 0 1 0\ntr 1 0.5\n").unwrap_err();
        assert!(err.to_string().contains("expected 2 features"));
    }
}
