//! Command-line client.
//!
//! Configuration comes from `--config`, the CHELONIA_CONFIG environment
//! variable, or `./chelonia.conf`:
//!
//! ```text
//! [client]
//! bartender_urls = chel://127.0.0.1:4000/Bartender
//! identity = CN=user
//! secret = user-secret
//! needed_replicas = 2
//! ```
//!
//! Exit codes: 0 ok, 1 user error, 2 system error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chelonia::client::{ClientConfig, GetOutcome, StorageClient, TcpTransport};
use chelonia::content::Content;
use chelonia::hed::config::Config;
use chelonia::hed::envelope::codes;

#[derive(Parser)]
#[command(name = "chelonia", about = "Storage cloud client", version)]
struct Cli {
    /// Path to the client configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upload a local file.
    Put {
        local: PathBuf,
        ln: String,
        /// Override the configured replica count.
        #[arg(long)]
        replicas: Option<u32>,
    },
    /// Download a file; prints external URLs it cannot fetch itself.
    Get { ln: String, local: Option<PathBuf> },
    /// List a collection.
    List { ln: String },
    /// Print entry metadata.
    Stat { ln: String },
    /// Create a collection.
    Mkdir { ln: String },
    /// Remove a file, mount point, or empty collection.
    Rm { ln: String },
    /// Rename or relocate an entry.
    Move { src: String, dst: String },
    /// Mount an external storage URL into the namespace.
    Mount { ln: String, url: String },
}

fn load_config(path: Option<PathBuf>) -> Result<ClientConfig, String> {
    let path = path
        .or_else(|| std::env::var_os("CHELONIA_CONFIG").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("chelonia.conf"));
    let cfg = Config::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ClientConfig::from_config(&cfg).map_err(|e| e.to_string())
}

/// Map stable error codes onto the documented exit classes.
fn exit_for(code: &str) -> ExitCode {
    match code {
        codes::NOT_FOUND
        | codes::NAME_TAKEN
        | codes::NOT_EMPTY
        | codes::NOT_A_FILE
        | codes::NOT_A_COLLECTION
        | codes::PARENT_MISSING
        | codes::ACCESS_DENIED
        | codes::BAD_REQUEST
        | "local-io" => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn run(client: &StorageClient<TcpTransport>, command: Command) -> Result<(), (String, String)> {
    let fail = |e: chelonia::client::ClientError| (e.code.clone(), e.to_string());
    match command {
        Command::Put { local, ln, replicas } => {
            let bytes = std::fs::read(&local)
                .map_err(|e| ("local-io".to_string(), format!("{}: {e}", local.display())))?;
            client
                .put(&ln, Content::Bytes(bytes), replicas)
                .map_err(fail)?;
            println!("uploaded {ln}");
        }
        Command::Get { ln, local } => match client.get(&ln).map_err(fail)? {
            GetOutcome::External(url) => println!("{url}"),
            GetOutcome::Data(content) => {
                let bytes = content.materialize();
                match local {
                    Some(path) => {
                        std::fs::write(&path, &bytes).map_err(|e| {
                            ("local-io".to_string(), format!("{}: {e}", path.display()))
                        })?;
                        println!("downloaded {ln} ({} bytes)", bytes.len());
                    }
                    None => {
                        use std::io::Write;
                        std::io::stdout().write_all(&bytes).ok();
                    }
                }
            }
        },
        Command::List { ln } => {
            for (name, (guid, etype)) in client.list(&ln).map_err(fail)? {
                println!("{name}\t{etype}\t{guid}");
            }
        }
        Command::Stat { ln } => {
            let meta = client.stat(&ln).map_err(fail)?;
            if let Some(m) = meta.as_map() {
                for (key, value) in m {
                    match value {
                        chelonia::codec::Msg::Str(s) => println!("{key}: {s}"),
                        chelonia::codec::Msg::Int(v) => println!("{key}: {v}"),
                        chelonia::codec::Msg::Map(inner) => {
                            println!("{key}: {} entries", inner.len())
                        }
                        chelonia::codec::Msg::List(items) => {
                            println!("{key}: {} rules", items.len())
                        }
                        _ => {}
                    }
                }
            }
        }
        Command::Mkdir { ln } => {
            client.mkdir(&ln).map_err(fail)?;
            println!("created {ln}");
        }
        Command::Rm { ln } => {
            // Collections are removed with the empty-collection rule.
            let meta = client.stat(&ln).map_err(fail)?;
            if meta.get_str("type") == Some("collection") {
                client.rmdir(&ln).map_err(fail)?;
            } else {
                client.del(&ln).map_err(fail)?;
            }
            println!("removed {ln}");
        }
        Command::Move { src, dst } => {
            client.mv(&src, &dst).map_err(fail)?;
            println!("moved {src} -> {dst}");
        }
        Command::Mount { ln, url } => {
            client.mount(&ln, &url).map_err(fail)?;
            println!("mounted {url} at {ln}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(1);
        }
    };
    let transport = TcpTransport::new(&cfg);
    let client = StorageClient::new(
        transport,
        cfg.retry_attempts,
        cfg.retry_backoff,
        cfg.default_needed_replicas,
    );
    match run(&client, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            exit_for(&code)
        }
    }
}
