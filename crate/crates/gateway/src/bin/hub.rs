use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gateway::hub::default_registry;
use gateway::state::StateError;
use gateway::{Hub, HubConfig, HubError};
use tracing::{error, info};

/// Run the session gateway hub.
#[derive(Parser)]
#[command(name = "hub", version)]
struct Args {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the listen address.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    /// Override the state database path.
    #[arg(long)]
    state_db: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    gateway::init_logging();
    let args = Args::parse();
    let mut config = match HubConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    if let Some(db) = args.state_db {
        config.state_db_path = db;
    }
    let registry = match default_registry(&config) {
        Ok(r) => r,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    let listen = config.listen;
    let hub = match Hub::new(config, Some(args.config), registry) {
        Ok(h) => h,
        Err(HubError::State(e @ StateError::Corrupt { .. })) => {
            error!("{e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    let listener = match tokio::net::TcpListener::bind(listen).await {
        Ok(l) => l,
        Err(e) => {
            error!("cannot listen on {listen}: {e}");
            return ExitCode::from(1);
        }
    };
    hub.recover().await;
    info!("hub listening on http://{listen}");
    match gateway::serve(hub, listener, gateway::termination()).await {
        Ok(()) => {
            info!("shut down; sessions left running");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
