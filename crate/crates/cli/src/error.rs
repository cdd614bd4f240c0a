use std::fmt;
use std::path::Path;

use tenreg::ErrorKind;

pub const EXIT_IO: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_SAMPLER: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self { code: EXIT_IO, msg: format!("{}: {e}", path.display()) }
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Self { code: EXIT_PARSE, msg: msg.into() }
    }

    /// Bad or missing settings share the parse exit code.
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::parse(msg)
    }

    /// Prefixes a library error with the file it concerns.
    pub fn at(path: &Path, e: tenreg::Error) -> Self {
        let mut c = Self::from(e);
        c.msg = format!("{}: {}", path.display(), c.msg);
        c
    }
}

impl From<tenreg::Error> for CliError {
    fn from(e: tenreg::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Io => EXIT_IO,
            ErrorKind::Parse | ErrorKind::Usage => EXIT_PARSE,
            ErrorKind::Numerical => EXIT_NUMERICAL,
            ErrorKind::Sampler => EXIT_SAMPLER,
        };
        // modes are 1-based on the command line
        let msg = match e {
            tenreg::Error::Singular { mode } => format!("singular Gram matrix while updating mode {}", mode + 1),
            e => e.to_string(),
        };
        Self { code, msg }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}
