//! The two environment variables the CLI reads.

use std::io::IsTerminal;

/// `always`, `never` or `auto` (default). `NO_COLOR` set to anything
/// non-empty also disables color.
pub const COLOR_VAR: &str = "FUNDUS_COLOR";
/// Upper bound on worker threads.
pub const THREADS_VAR: &str = "FUNDUS_THREADS";

#[derive(Debug, Clone)]
pub struct Env {
    pub color_stdout: bool,
    pub color_stderr: bool,
    pub threads: usize,
}

impl Env {
    pub fn from_process() -> Result<Self, String> {
        let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
        let mode = std::env::var(COLOR_VAR).unwrap_or_else(|_| "auto".into());
        let (out, err) = match mode.as_str() {
            "always" => (true, true),
            "never" => (false, false),
            "auto" | "" => (
                !no_color && std::io::stdout().is_terminal(),
                !no_color && std::io::stderr().is_terminal(),
            ),
            other => {
                return Err(format!(
                    "{COLOR_VAR}={other}: expected always, never or auto"
                ))
            }
        };
        let available = std::thread::available_parallelism().map_or(1, |n| n.get());
        let threads = match std::env::var(THREADS_VAR) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => n.min(available),
                _ => return Err(format!("{THREADS_VAR}={v}: expected a positive integer")),
            },
            Err(_) => available,
        };
        Ok(Env {
            color_stdout: out,
            color_stderr: err,
            threads,
        })
    }
}

pub fn error_prefix(color: bool) -> &'static str {
    if color {
        "\x1b[1;31merror:\x1b[0m"
    } else {
        "error:"
    }
}

pub fn bold(s: &str, color: bool) -> String {
    if color {
        format!("\x1b[1m{s}\x1b[0m")
    } else {
        s.to_string()
    }
}
