use std::process::ExitCode;

use gateway::user_server::{run, UserServerConfig};
use tracing::error;

#[tokio::main]
async fn main() -> ExitCode {
    gateway::init_logging();
    let result = match UserServerConfig::from_env() {
        Ok(cfg) => run(cfg, gateway::termination()).await,
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
