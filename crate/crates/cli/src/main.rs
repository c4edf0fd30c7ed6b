//! `ictracker`: owner wallets, tracker services, audits and scenario runs
//! over a ledger directory.
//!
//! The ledger directory holds `ledger.jsonl` and one `wallets/<name>.wallet`
//! file per owner. It is taken from `--ledger`, else the config file's
//! `ledger` key, else `ICTOKEN_LEDGER_DIR`, else `./ictoken-data`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ictoken::consensus::{default_quorum, Behavior, NetworkConfig};
use ictoken::crypto::Digest;
use ictoken::harness::{self, audit_ic, Mode, OwnerNames, ScenarioRun, ATTACKS};
use ictoken::token::{IcKeyBox, IcMetadata, IcToken, PublicId, Stage, Status, LAYOUT, TOKEN_LEN};
use ictoken::tracker::{verify_ledger_text, Ledger, Tracker, Transaction, DEFAULT_BLOCK_CAPACITY};
use ictoken::wallet::{CompositionTarget, Owner, PublicProfile, TrackerEndpoint, Wallet, WalletError};

const LEDGER_ENV: &str = "ICTOKEN_LEDGER_DIR";
const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Parser)]
#[command(name = "ictracker", version, about = "ICtoken wallet, tracker and scenario runner")]
struct Cli {
    /// Config file (TOML): nodes, quorum, block_capacity, seed, ledger.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Ledger directory; overrides the config file and ICTOKEN_LEDGER_DIR.
    #[arg(long, global = true)]
    ledger: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create or enroll owners.
    #[command(subcommand)]
    Owner(OwnerCmd),
    /// Run tracker services on ICs.
    #[command(subcommand)]
    Ic(IcCmd),
    /// Print the provenance of an IC.
    Audit { icid: String },
    /// Inspect the ledger file.
    #[command(subcommand)]
    Ledger(LedgerCmd),
    /// Simulate the consortium network.
    #[command(subcommand)]
    Net(NetCmd),
    /// Replay a built-in scenario (table2, multi-ic).
    Scenario(ScenarioArgs),
    /// Run a must-fail attack script, or `all`.
    Attack(AttackArgs),
    #[command(subcommand)]
    Selftest(SelftestCmd),
}

#[derive(Subcommand)]
enum OwnerCmd {
    /// Generate a key pair and write a wallet file.
    Create {
        name: String,
        #[arg(long)]
        role: String,
        /// Derive the key pair from this seed instead of system entropy.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register an owner's public profile with the tracker.
    Enroll { name: String },
}

#[derive(Subcommand)]
enum IcCmd {
    Enroll {
        #[arg(long)]
        owner: String,
        #[arg(long)]
        uid: String,
        #[arg(long)]
        markings: String,
        /// Metering key as 64 hex digits; random if omitted.
        #[arg(long)]
        key: Option<String>,
    },
    Transfer {
        #[arg(long)]
        owner: String,
        #[arg(long)]
        ic: String,
        /// Wallet name or publicID of the new owner.
        #[arg(long)]
        to: String,
    },
    UpdateStage {
        #[arg(long)]
        owner: String,
        #[arg(long)]
        ic: String,
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        status: u8,
    },
    Assemble {
        #[arg(long)]
        owner: String,
        /// Comma-separated ICIDs.
        #[arg(long, value_delimiter = ',')]
        ics: Vec<String>,
    },
    Integrate {
        #[arg(long)]
        owner: String,
        #[arg(long, value_delimiter = ',')]
        ics: Vec<String>,
    },
    ReportDefect {
        #[arg(long)]
        owner: String,
        #[arg(long)]
        ic: String,
    },
}

#[derive(Subcommand)]
enum LedgerCmd {
    Verify,
    Show,
}

#[derive(Subcommand)]
enum NetCmd {
    /// Replay a scenario on a simulated network and print each round.
    Run(NetArgs),
}

#[derive(Args)]
struct NetArgs {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quorum: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
    /// Faulty node as INDEX=BEHAVIOR (propose-invalid, vote-random, equivocate).
    #[arg(long, value_parser = parse_byzantine)]
    byzantine: Vec<(usize, Behavior)>,
    #[arg(long, default_value = "table2")]
    scenario: String,
    /// Validate proposals on one thread per node.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ScenarioArgs {
    name: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the machine-readable report instead of text.
    #[arg(long)]
    json: bool,
    /// Use one tracker instead of the configured network.
    #[arg(long)]
    single: bool,
    /// Write ledger.jsonl, report.txt and report.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    name: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    single: bool,
}

#[derive(Subcommand)]
enum SelftestCmd {
    /// Print the token layout and its encoded size.
    Sizes,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    nodes: Option<usize>,
    quorum: Option<usize>,
    block_capacity: Option<usize>,
    seed: Option<u64>,
    ledger: Option<PathBuf>,
}

/// A service or check refused the request; printed as its class name.
#[derive(Debug)]
struct Rejection {
    class: String,
    detail: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rejected: {}", self.class)
    }
}

impl std::error::Error for Rejection {}

fn reject(class: impl Into<String>, detail: impl fmt::Display) -> anyhow::Error {
    Rejection {
        class: class.into(),
        detail: detail.to_string(),
    }
    .into()
}

impl From<WalletError> for Rejection {
    fn from(e: WalletError) -> Self {
        Rejection {
            class: e.class().to_string(),
            detail: e.to_string(),
        }
    }
}

fn wallet_err(e: WalletError) -> anyhow::Error {
    Rejection::from(e).into()
}

fn parse_byzantine(s: &str) -> Result<(usize, Behavior), String> {
    let (node, behavior) = s.split_once('=').ok_or("expected INDEX=BEHAVIOR")?;
    let node = node.parse().map_err(|_| format!("bad node index {node:?}"))?;
    Ok((node, behavior.parse()?))
}

struct Ctx {
    dir: PathBuf,
    config: Config,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Ctx> {
        let config = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Config::default(),
        };
        let dir = cli
            .ledger
            .clone()
            .or_else(|| config.ledger.clone())
            .or_else(|| std::env::var_os(LEDGER_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ictoken-data"));
        Ok(Ctx { dir, config })
    }

    fn capacity(&self) -> usize {
        self.config.block_capacity.unwrap_or(DEFAULT_BLOCK_CAPACITY)
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.config.seed).unwrap_or(0)
    }

    fn network(&self, nodes: Option<usize>, quorum: Option<usize>, seed: u64) -> NetworkConfig {
        let nodes = nodes.or(self.config.nodes).unwrap_or(4);
        let mut config = NetworkConfig::new(nodes);
        config.quorum = quorum.or(self.config.quorum).unwrap_or(default_quorum(nodes));
        config.block_capacity = self.capacity();
        config.seed = seed;
        config
    }

    fn ledger_path(&self) -> PathBuf {
        self.dir.join(LEDGER_FILE)
    }

    fn wallet_path(&self, name: &str) -> PathBuf {
        self.dir.join("wallets").join(format!("{name}.wallet"))
    }

    fn tracker(&self) -> Result<Tracker> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(Tracker::with_capacity(self.capacity()));
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let ledger = Ledger::from_text(&text).map_err(|f| reject("CorruptLedger", f))?;
        Tracker::from_ledger(ledger, self.capacity()).map_err(|f| reject("CorruptLedger", f))
    }

    fn save(&self, tracker: &mut Tracker) -> Result<()> {
        tracker.flush();
        write_atomic(&self.ledger_path(), tracker.ledger().to_text().as_bytes())
    }

    fn wallet(&self, name: &str) -> Result<Wallet> {
        let path = self.wallet_path(name);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("no wallet {name:?} at {}", path.display()))?;
        Wallet::from_text(&text).map_err(wallet_err)
    }

    fn synced_wallet(&self, name: &str, tracker: &Tracker) -> Result<Wallet> {
        let mut wallet = self.wallet(name)?;
        wallet.sync_assets(tracker).map_err(wallet_err)?;
        Ok(wallet)
    }

    fn save_wallet(&self, name: &str, wallet: &Wallet) -> Result<()> {
        write_atomic(&self.wallet_path(name), wallet.to_text().as_bytes())
    }

    /// Wallet files in the directory, by publicID.
    fn owner_names(&self) -> BTreeMap<PublicId, String> {
        let Ok(entries) = fs::read_dir(self.dir.join("wallets")) else {
            return BTreeMap::new();
        };
        entries
            .flatten()
            .filter_map(|e| {
                let name = e.path().file_stem()?.to_str()?.to_string();
                let wallet = Wallet::from_text(&fs::read_to_string(e.path()).ok()?).ok()?;
                Some((wallet.public_id(), format!("{name}({})", wallet.owner().role)))
            })
            .collect()
    }

    fn profile_of(&self, target: &str, tracker: &Tracker) -> Result<PublicProfile> {
        if self.wallet_path(target).exists() {
            return Ok(self.wallet(target)?.profile());
        }
        let id = Digest::from_hex(target)
            .map(PublicId)
            .map_err(|_| anyhow::anyhow!("{target:?} is neither a wallet name nor a publicID"))?;
        TrackerEndpoint::profile(tracker, &id)
            .ok_or_else(|| reject("NewOwnerNotEnrolled", format!("{target} is not enrolled")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn icid(text: &str) -> Result<Digest> {
    Digest::from_hex(text).map_err(|_| anyhow::anyhow!("{text:?} is not a 64-digit lowercase hex ICID"))
}

fn submit(ctx: &Ctx, tracker: &mut Tracker, tx: Transaction) -> Result<Vec<u64>> {
    let seqs = tracker
        .submit(&tx)
        .map_err(|e| reject(e.class(), e))?;
    ctx.save(tracker)?;
    Ok(seqs.into_iter().map(|s| s.get()).collect())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            match e.downcast_ref::<Rejection>() {
                Some(r) => {
                    println!("{r}");
                    eprintln!("{}", r.detail);
                }
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Ctx::load(&cli)?;
    match cli.command {
        Command::Owner(cmd) => owner(&ctx, cmd),
        Command::Ic(cmd) => ic(&ctx, cmd),
        Command::Audit { icid: id } => {
            let tracker = ctx.tracker()?;
            let names = ctx.owner_names();
            let text = audit_ic(&tracker, &icid(&id)?, &OwnerNames(&names))
                .map_err(|e| reject(e.class(), e))?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Ledger(LedgerCmd::Verify) => {
            let path = ctx.ledger_path();
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report = verify_ledger_text(&text);
            println!("{}", report.to_string().trim_end());
            if report.is_valid() {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(reject("CorruptLedger", format!("{} fault(s)", report.faults.len())))
            }
        }
        Command::Ledger(LedgerCmd::Show) => {
            let tracker = ctx.tracker()?;
            show_ledger(&tracker);
            Ok(ExitCode::SUCCESS)
        }
        Command::Net(NetCmd::Run(args)) => net_run(&ctx, args),
        Command::Scenario(args) => scenario(&ctx, args),
        Command::Attack(args) => attack(&ctx, args),
        Command::Selftest(SelftestCmd::Sizes) => sizes(),
    }
}

fn owner(ctx: &Ctx, cmd: OwnerCmd) -> Result<ExitCode> {
    match cmd {
        OwnerCmd::Create { name, role, seed } => {
            if ctx.wallet_path(&name).exists() {
                bail!("wallet {name:?} already exists");
            }
            let wallet = Wallet::new(Owner::create(&role, seed));
            ctx.save_wallet(&name, &wallet)?;
            println!("created {name} role={role} public_id={}", wallet.public_id());
        }
        OwnerCmd::Enroll { name } => {
            let wallet = ctx.wallet(&name)?;
            let mut tracker = ctx.tracker()?;
            submit(ctx, &mut tracker, Transaction::EnrollOwner(wallet.profile()))?;
            println!("enrolled {name} public_id={}", wallet.public_id());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn ic(ctx: &Ctx, cmd: IcCmd) -> Result<ExitCode> {
    let mut tracker = ctx.tracker()?;
    let owner_name = match &cmd {
        IcCmd::Enroll { owner, .. }
        | IcCmd::Transfer { owner, .. }
        | IcCmd::UpdateStage { owner, .. }
        | IcCmd::Assemble { owner, .. }
        | IcCmd::Integrate { owner, .. }
        | IcCmd::ReportDefect { owner, .. } => owner.clone(),
    };
    let mut wallet = ctx.synced_wallet(&owner_name, &tracker)?;
    let (tx, what) = match cmd {
        IcCmd::Enroll { uid, markings, key, .. } => {
            let key: [u8; 32] = match key {
                Some(hex_key) => {
                    let mut key = [0u8; 32];
                    hex_decode(&hex_key, &mut key)?;
                    key
                }
                None => rand::random(),
            };
            let token = wallet
                .build_enrollment(uid.as_bytes(), &markings, &key)
                .map_err(wallet_err)?;
            (Transaction::EnrollIc(token), "enrolled")
        }
        IcCmd::Transfer { ic, to, .. } => {
            let profile = ctx.profile_of(&to, &tracker)?;
            let token = wallet.build_transfer(&icid(&ic)?, &profile).map_err(wallet_err)?;
            (Transaction::Transfer(token), "transferred")
        }
        IcCmd::UpdateStage { ic, stage, status, .. } => {
            let stage = Stage::try_from(stage).map_err(|_| anyhow::anyhow!("stage must be 1..=4"))?;
            let status = Status::try_from(status).map_err(|_| anyhow::anyhow!("status must be 0 or 1"))?;
            let token = wallet
                .build_stage_update(&icid(&ic)?, stage, status)
                .map_err(wallet_err)?;
            (Transaction::UpdateStage(token), "updated")
        }
        IcCmd::Assemble { ics, .. } => {
            let ids = ics.iter().map(|s| icid(s)).collect::<Result<Vec<_>>>()?;
            let batch = wallet
                .build_composition_update(&ids, CompositionTarget::Pcb)
                .map_err(wallet_err)?;
            (Transaction::UpdateComposition(batch), "assembled")
        }
        IcCmd::Integrate { ics, .. } => {
            let ids = ics.iter().map(|s| icid(s)).collect::<Result<Vec<_>>>()?;
            let batch = wallet
                .build_composition_update(&ids, CompositionTarget::Device)
                .map_err(wallet_err)?;
            (Transaction::UpdateComposition(batch), "integrated")
        }
        IcCmd::ReportDefect { ic, .. } => {
            let token = wallet.build_defect_report(&icid(&ic)?).map_err(wallet_err)?;
            (Transaction::ReportDefective(token), "reported defective")
        }
    };
    let seqs = submit(ctx, &mut tracker, tx.clone())?;
    for (token, seq) in tx.tokens().iter().zip(&seqs) {
        let m = &token.metadata;
        print!("{what} icid={} seq={seq} stage={} status={}", m.icid, m.stage.code(), m.status.code());
        if let Some(pid) = m.pid {
            print!(" pid={pid}");
        }
        if let Some(edid) = m.edid {
            print!(" edid={edid}");
        }
        println!();
    }
    wallet.sync_assets(&tracker).map_err(wallet_err)?;
    ctx.save_wallet(&owner_name, &wallet)?;
    Ok(ExitCode::SUCCESS)
}

fn hex_decode(text: &str, out: &mut [u8; 32]) -> Result<()> {
    let bytes = Digest::from_hex(text).map_err(|_| anyhow::anyhow!("key must be 64 lowercase hex digits"))?;
    out.copy_from_slice(&bytes.0);
    Ok(())
}

fn show_ledger(tracker: &Tracker) {
    for block in tracker.ledger().blocks() {
        println!(
            "block {} hash={} prev={} root={} entries={}",
            block.index,
            block.block_hash.short(),
            block.prev_hash.short(),
            block.token_root.short(),
            block.entries.len()
        );
        for entry in &block.entries {
            match entry {
                Transaction::EnrollOwner(p) => println!("  {} owner={}", entry.service(), p.public_id.0.short()),
                _ => {
                    for t in entry.tokens() {
                        println!(
                            "  {} icid={} v{} stage={} status={} owner={}",
                            entry.service(),
                            t.icid().short(),
                            t.metadata.version,
                            t.metadata.stage.code(),
                            t.metadata.status.code(),
                            t.owner.0.short()
                        );
                    }
                }
            }
        }
    }
    println!(
        "height {} tokens {}",
        tracker.ledger().height(),
        tracker.state().committed_tokens()
    );
}

fn print_run(run: &ScenarioRun, json: bool) {
    if json {
        print!("{}", run.report_json);
    } else {
        print!("{}", run.report_text);
    }
}

fn scenario(ctx: &Ctx, args: ScenarioArgs) -> Result<ExitCode> {
    let seed = ctx.seed(args.seed);
    let mode = if args.single {
        Mode::Single { capacity: ctx.capacity() }
    } else {
        Mode::Network {
            config: ctx.network(None, None, seed),
            byzantine: Vec::new(),
        }
    };
    let run = harness::run_scenario(&args.name, seed, &mode)?;
    print_run(&run, args.json);
    if let Some(out) = &args.out {
        write_atomic(&out.join(LEDGER_FILE), run.ledger_text.as_bytes())?;
        write_atomic(&out.join("report.txt"), run.report_text.as_bytes())?;
        write_atomic(&out.join("report.json"), run.report_json.as_bytes())?;
    }
    if run.report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(reject("ScenarioFailed", format!("scenario {} did not pass", args.name)))
    }
}

fn attack(ctx: &Ctx, args: AttackArgs) -> Result<ExitCode> {
    let seed = ctx.seed(args.seed);
    let mode = if args.single {
        Mode::Single { capacity: ctx.capacity() }
    } else {
        Mode::Network {
            config: ctx.network(None, None, seed),
            byzantine: Vec::new(),
        }
    };
    let names: Vec<&str> = if args.name == "all" {
        ATTACKS.iter().map(|a| a.name).collect()
    } else {
        vec![args.name.as_str()]
    };
    let mut failed = Vec::new();
    for name in names {
        let run = harness::run_attack(name, seed, &mode)?;
        if args.name == "all" && !args.json {
            let verdict = run.report.attack.as_ref().expect("attack runs carry a verdict");
            println!(
                "attack {name}: {} [{}]",
                verdict.observed.join(", "),
                if run.report.passed() { "caught" } else { "MISSED" }
            );
        } else {
            print_run(&run, args.json);
        }
        if !run.report.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(reject("AttackAccepted", format!("not caught: {}", failed.join(", "))))
    }
}

fn net_run(ctx: &Ctx, args: NetArgs) -> Result<ExitCode> {
    let seed = ctx.seed(args.seed);
    let mut config = ctx.network(args.nodes, args.quorum, seed);
    if let Some(capacity) = args.capacity {
        config.block_capacity = capacity;
    }
    config.parallel = args.parallel;
    if let Some((node, _)) = args.byzantine.iter().find(|(n, _)| *n >= config.node_count) {
        bail!("node {node} does not exist in a {}-node network", config.node_count);
    }
    let mode = Mode::Network {
        config,
        byzantine: args.byzantine,
    };
    let run = harness::run_scenario(&args.scenario, seed, &mode)?;
    for line in &run.round_log {
        println!("{line}");
    }
    for inv in &run.report.invariants {
        println!("{}: {} ({})", inv.name, if inv.passed { "pass" } else { "FAIL" }, inv.detail);
    }
    println!(
        "{}: {} steps, height {}, {}",
        run.report.scenario,
        run.report.steps.len(),
        run.report.chain_height,
        if run.report.passed() { "PASS" } else { "FAIL" }
    );
    if run.report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(reject("ScenarioFailed", "network run did not pass"))
    }
}

fn sizes() -> Result<ExitCode> {
    for (field, len) in LAYOUT {
        println!("{field:<10} {len:>4}");
    }
    let total: usize = LAYOUT.iter().map(|(_, len)| len).sum();
    let sample = IcToken {
        metadata: IcMetadata::fabricated(Digest([1; 32]), Digest([2; 32])),
        key: IcKeyBox {
            key_encr: Default::default(),
            key_hash: Digest([3; 32]),
        },
        owner: PublicId(Digest([4; 32])),
        trnsaxn_id: Default::default(),
    };
    let encoded = sample.encode()?.len();
    println!("total      {total:>4}");
    if total != TOKEN_LEN || encoded != TOKEN_LEN {
        bail!("layout sums to {total}, encoder emits {encoded}, expected {TOKEN_LEN}");
    }
    println!("{TOKEN_LEN}");
    Ok(ExitCode::SUCCESS)
}
