// SPDX-License-Identifier: MIT OR Apache-2.0

//! CLI failures and their exit codes.

use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or a config file that fails the schema.
    #[error("{message}")]
    Config { code: &'static str, message: String },
    #[error(transparent)]
    Core(#[from] saesteer::Error),
    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Config {
            code,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_USAGE,
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) | CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config { code, .. } => code,
            CliError::Core(e) => e.code(),
            CliError::Runtime(_) => "runtime",
        }
    }

    /// `{"error":{"code":...,"message":...}}`, one line.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            code: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper {
            error: Body {
                code: self.code(),
                message: self.to_string(),
            },
        })
        .expect("plain strings serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use saesteer::ContainerError;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::config("config.unknown_key", "x").exit_code(), EXIT_USAGE);
        let missing = CliError::from(saesteer::Error::from(ContainerError::ManifestMissing("m".into())));
        assert_eq!(missing.exit_code(), EXIT_DATA);
        assert_eq!(missing.code(), "container.manifest_missing");
        assert_eq!(
            CliError::from(saesteer::Error::NonFinite("x")).exit_code(),
            EXIT_RUNTIME
        );
        let v: serde_json::Value = serde_json::from_str(&missing.to_json()).unwrap();
        assert_eq!(v["error"]["code"], "container.manifest_missing");
    }
}
