//! `--config <file>` support: the file's `key=value` lines become ordinary
//! long flags placed before the explicit ones, so explicit flags win.

use std::ffi::OsString;

use amsh_core::kv::KeyValues;

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Turns one config entry into flag arguments. `true`/`false` values are
/// treated as switches.
fn entry_to_args(key: &str, value: &str) -> Vec<OsString> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        "true" => vec![flag.into()],
        "false" => Vec::new(),
        _ => vec![flag.into(), value.into()],
    }
}

/// Returns `args` with the config file's entries spliced in after the
/// subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let kv = KeyValues::load(&path).map_err(|e| e.to_string())?;
    let split = 2.min(args.len());
    let mut out: Vec<OsString> = args[..split].to_vec();
    for (k, v) in kv.iter() {
        out.extend(entry_to_args(k, v));
    }
    out.extend_from_slice(&args[split..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn entries_become_flags() {
        assert_eq!(entry_to_args("max_iters", "5"), os(&["--max-iters", "5"]));
        assert_eq!(entry_to_args("paired", "true"), os(&["--paired"]));
        assert!(entry_to_args("paired", "false").is_empty());
    }

    #[test]
    fn config_is_spliced_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.kv");
        std::fs::write(&path, "bits=8\nlambda=0.01\n").unwrap();
        let p = path.to_string_lossy().to_string();
        let args = os(&["amsh", "train", "--config", &p, "--bits", "12"]);
        let out = expand(args).unwrap();
        assert_eq!(
            out,
            os(&["amsh", "train", "--bits", "8", "--lambda", "0.01", "--config", &p, "--bits", "12"])
        );
        let eq = format!("--config={p}");
        assert_eq!(expand(os(&["amsh", "train", &eq])).unwrap()[2], "--bits");
        assert!(expand(os(&["amsh", "train", "--config", "/nonexistent/x.kv"])).is_err());
        assert_eq!(expand(os(&["amsh"])).unwrap(), os(&["amsh"]));
    }
}
