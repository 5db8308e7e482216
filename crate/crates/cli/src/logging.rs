use log::{LevelFilter, Log, Metadata, Record};

/// One JSON object per line on stderr.
struct JsonLogger;

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        eprintln!("{line}");
    }

    fn flush(&self) {}
}

/// Level from `ALM_LOG` (error, warn, info, debug, trace, off); info by
/// default.
pub fn init() {
    let level = std::env::var("ALM_LOG")
        .ok()
        .and_then(|v| v.parse::<LevelFilter>().ok())
        .unwrap_or(LevelFilter::Info);
    if log::set_logger(&JsonLogger).is_ok() {
        log::set_max_level(level);
    }
}
