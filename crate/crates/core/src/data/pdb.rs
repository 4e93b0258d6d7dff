//! Cα extraction from the fixed-column PDB format (ATOM records only).

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Conformation;

/// Which chain to read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PdbChain {
    /// The chain of the first CA atom.
    #[default]
    First,
    Id(char),
}

/// Reads Cα coordinates (and residue names) of one chain of the first model.
///
/// For residues with alternate locations, the first altloc listed wins.
pub fn read_pdb_calpha(path: &Path, chain: PdbChain) -> Result<(Conformation, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    parse_pdb_calpha(&text, path, chain)
}

pub fn parse_pdb_calpha(text: &str, path: &Path, chain: PdbChain) -> Result<(Conformation, Vec<String>)> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut coords = Vec::new();
    let mut names = Vec::new();
    let mut last_residue: Option<(char, String)> = None;
    let mut selected = match chain {
        PdbChain::First => None,
        PdbChain::Id(c) => Some(c),
    };
    let mut seen_model = false;

    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.starts_with("MODEL") {
            if seen_model {
                break;
            }
            seen_model = true;
            continue;
        }
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if !line.is_ascii() {
            return Err(err(lineno, "non-ASCII characters in ATOM record".into()));
        }
        let field = |a: usize, b: usize| line.get(a..b.min(line.len())).ok_or_else(|| err(lineno, format!("record too short for columns {}-{b}", a + 1)));
        if field(12, 16)?.trim() != "CA" {
            continue;
        }
        if line.len() < 54 {
            return Err(err(lineno, format!("ATOM record has {} columns, coordinates need 54", line.len())));
        }
        let chain_id = line[21..22].chars().next().unwrap_or(' ');
        match selected {
            None => selected = Some(chain_id),
            Some(c) if c != chain_id => continue,
            _ => {}
        }
        // residue key: sequence number plus insertion code
        let key = (chain_id, line[22..27].to_string());
        if last_residue.as_ref() == Some(&key) {
            continue; // a later altloc of the same residue
        }
        let parse = |a: usize, b: usize, what: &str| {
            line[a..b]
                .trim()
                .parse::<f64>()
                .map_err(|_| err(lineno, format!("malformed {what} coordinate '{}' in columns {}-{b}", line[a..b].trim(), a + 1)))
        };
        coords.push([parse(30, 38, "x")?, parse(38, 46, "y")?, parse(46, 54, "z")?]);
        names.push(line[17..20].trim().to_string());
        last_residue = Some(key);
    }
    if coords.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no CA atoms found{}",
            path.display(),
            match chain {
                PdbChain::Id(c) => format!(" in chain {c}"),
                PdbChain::First => String::new(),
            }
        )));
    }
    Ok((Conformation::new(coords)?, names))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(serial: usize, name: &str, alt: char, res: &str, chain: char, seq: usize, xyz: [f64; 3]) -> String {
        format!(
            "ATOM  {serial:>5} {name:<4}{alt}{res:>3} {chain}{seq:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00           C",
            xyz[0], xyz[1], xyz[2]
        )
    }

    fn parse(text: &str, chain: PdbChain) -> Result<(Conformation, Vec<String>)> {
        parse_pdb_calpha(text, Path::new("test.pdb"), chain)
    }

    #[test]
    fn minimal_two_residues() {
        let text = [
            atom(1, " N", ' ', "GLY", 'A', 1, [0.0, 0.0, 0.0]),
            atom(2, " CA", ' ', "GLY", 'A', 1, [1.5, -2.25, 3.125]),
            atom(3, " CA", ' ', "ALA", 'A', 2, [4.0, 5.0, -6.5]),
            "END".into(),
        ]
        .join("\n");
        let (x, names) = parse(&text, PdbChain::First).unwrap();
        assert_eq!(x.coords(), &[[1.5, -2.25, 3.125], [4.0, 5.0, -6.5]]);
        assert_eq!(names, vec!["GLY", "ALA"]);
    }

    #[test]
    fn altloc_a_wins() {
        let text = [
            atom(1, " CA", 'A', "SER", 'A', 1, [1.0, 0.0, 0.0]),
            atom(2, " CA", 'B', "SER", 'A', 1, [9.0, 9.0, 9.0]),
            atom(3, " CA", ' ', "GLY", 'A', 2, [2.0, 0.0, 0.0]),
        ]
        .join("\n");
        let (x, _) = parse(&text, PdbChain::First).unwrap();
        assert_eq!(x.coords(), &[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    }

    #[test]
    fn first_model_and_chain_selection() {
        let text = [
            "MODEL        1".to_string(),
            atom(1, " CA", ' ', "GLY", 'A', 1, [1.0, 0.0, 0.0]),
            atom(2, " CA", ' ', "GLY", 'A', 2, [2.0, 0.0, 0.0]),
            atom(3, " CA", ' ', "GLY", 'B', 1, [3.0, 0.0, 0.0]),
            atom(4, " CA", ' ', "GLY", 'B', 2, [4.0, 0.0, 0.0]),
            "ENDMDL".into(),
            "MODEL        2".into(),
            atom(5, " CA", ' ', "GLY", 'A', 1, [7.0, 0.0, 0.0]),
        ]
        .join("\n");
        let (a, _) = parse(&text, PdbChain::First).unwrap();
        assert_eq!(a.coords(), &[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let (b, _) = parse(&text, PdbChain::Id('B')).unwrap();
        assert_eq!(b.coords(), &[[3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        assert!(parse(&text, PdbChain::Id('C')).is_err());
    }

    #[test]
    fn errors_report_line_numbers() {
        let good = atom(1, " CA", ' ', "GLY", 'A', 1, [1.0, 0.0, 0.0]);
        let mut bad = atom(2, " CA", ' ', "GLY", 'A', 2, [2.0, 0.0, 0.0]);
        bad.replace_range(32..36, "ab.c");
        match parse(&format!("REMARK x\n{good}\n{bad}"), PdbChain::First) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("x coordinate"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse(&format!("{good}\n{}", &good[..40]), PdbChain::First) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("HEADER only\n", PdbChain::First), Err(Error::InvalidInput(_))));
    }
}
