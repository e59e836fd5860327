use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::LanguageTable;
use crate::linalg::{norm, Matrix};
use crate::simcore::{normalize_rows, EmbeddingMatrix};

use super::matrix_file::read_matrix;

/// Strips dataset artifacts: a leading numeric index (`027.`), underscores
/// and repeated whitespace. `"027.Shiny_Cowbird"` becomes `"Shiny Cowbird"`.
pub fn clean_name(raw: &str) -> String {
    let s = raw.trim();
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    let rest = &s[digits..];
    let s = if digits > 0 && rest.starts_with(['.', '_', ' ', '-']) {
        rest.trim_start_matches(['.', '_', ' ', '-'])
    } else {
        s
    };
    s.replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One entry per line; a single trailing newline is allowed.
pub fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = super::read_text(path)?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

pub fn write_names(path: &Path, names: &[String]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    super::atomic_write(path, text.as_bytes())
}

/// Rows already unit-norm to single precision are kept bit-for-bit, so that
/// loading and saving a table does not drift; others are normalized.
pub(crate) fn unit_rows(m: Matrix<f64>) -> Result<EmbeddingMatrix<f64>> {
    let unit = m.row_iter().all(|r| (norm(r) - 1.0).abs() <= 1e-6);
    if unit {
        EmbeddingMatrix::from_unit_rows(m)
    } else {
        normalize_rows(&m)
    }
}

/// Loads a name-indexed language table. Rows are normalized and names
/// cleaned; `primer` is kept as metadata only.
pub fn load_language_table(
    matrix_path: &Path,
    names_path: &Path,
    primer: Option<String>,
) -> Result<LanguageTable<f64>> {
    let m = read_matrix(matrix_path)?;
    let names: Vec<String> = read_names(names_path)?.iter().map(|n| clean_name(n)).collect();
    if names.len() != m.rows() {
        return Err(Error::CountMismatch {
            what: format!("names in {}", names_path.display()),
            expected: m.rows(),
            found: names.len(),
        });
    }
    let mut table = LanguageTable::new(names, unit_rows(m)?)?;
    table.primer = primer;
    Ok(table)
}
