//! Minimal stderr logger: plain lines by default, line-delimited JSON
//! with `--log-json`.

use log::{Level, Log, Metadata, Record};

pub struct CliLogger {
    pub json: bool,
}

impl Log for CliLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let level = record.level().to_string().to_lowercase();
        if self.json {
            let line = serde_json::json!({
                "level": level,
                "msg": record.args().to_string(),
            });
            eprintln!("{line}");
        } else {
            eprintln!("{}: {}", level, record.args());
        }
    }

    fn flush(&self) {}
}

pub fn install(json: bool) {
    let _ = log::set_boxed_logger(Box::new(CliLogger { json }));
    log::set_max_level(log::LevelFilter::Info);
}
