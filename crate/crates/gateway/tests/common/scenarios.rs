//! The lifecycle suite, run unchanged against every scheduler dialect. Only
//! the cluster's dialect differs between runs.

use std::time::{Duration, Instant};

use mocksched::{Dialect, JobState, Tool};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{audit_clean, check, free_port, Api, Cluster, HubProc};

pub const SCENARIOS: [&str; 12] = [
    "submit",
    "pending",
    "running-host-discovery",
    "callback",
    "stop",
    "cancel-while-pending",
    "timeout",
    "vanish",
    "restart-recover",
    "double-spawn",
    "poll-idempotence",
    "state-round-trip",
];

const UP: Duration = Duration::from_secs(5);
/// Delay that keeps a job queued for the length of a scenario.
const FOREVER: f64 = 1000.0;

pub struct Ctx {
    pub cluster: Cluster,
    pub hub: HubProc,
    pub api: Api,
}

impl Ctx {
    pub fn new(dialect: Dialect) -> Self {
        let cluster = Cluster::new(dialect);
        let port = free_port();
        let hub = HubProc::start(cluster.dir.path(), port, &cluster.hub_config(port));
        let api = hub.api();
        Ctx { cluster, hub, api }
    }

    fn job(&self, user: &str) -> Result<mocksched::MockJob, String> {
        self.cluster.job_for(user).ok_or_else(|| format!("no mock job for {user}"))
    }

    async fn wait_job(&self, user: &str, state: JobState) -> Result<mocksched::MockJob, String> {
        let deadline = Instant::now() + UP;
        loop {
            if let Some(job) = self.cluster.job_for(user) {
                if job.state == state {
                    return Ok(job);
                }
            }
            if Instant::now() > deadline {
                return Err(format!("job of {user} not {state:?}: {:?}", self.cluster.job_for(user)));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    async fn record(&self, user: &str) -> Result<Value, String> {
        self.api
            .session_record(user)
            .await
            .ok_or_else(|| format!("no session record for {user}"))
    }

    async fn spawn_ok(&self, user: &str, profile: Option<&str>) -> Result<Value, String> {
        let (status, body) = self.api.spawn(user, profile).await;
        check(status == StatusCode::ACCEPTED, || format!("spawn {user}: {status} {body}"))?;
        check(body["phase"] == "Submitting", || format!("spawn returned {body}"))?;
        Ok(body)
    }

    async fn stop_ok(&self, user: &str) -> Result<Value, String> {
        let (status, body) = self.api.stop(user).await;
        check(status == StatusCode::OK, || format!("stop {user}: {status} {body}"))?;
        check(body["phase"] == "Stopped", || format!("stop returned {body}"))?;
        Ok(body)
    }

    async fn running(&self, user: &str, profile: Option<&str>) -> Result<Value, String> {
        self.spawn_ok(user, profile).await?;
        self.api.wait_phase(user, "Running", UP).await
    }

    async fn ping_ok(&self, user: &str) -> Result<(), String> {
        let (status, body) = self.api.ping(user).await;
        check(status == StatusCode::OK && body == "pong", || format!("ping {user}: {status} {body}"))
    }
}

/// Run one scenario, then require a clean coherence audit.
pub async fn run(ctx: &mut Ctx, name: &str) -> Result<(), String> {
    let sched = &ctx.cluster.sched;
    sched.realtime().map_err(|e| e.to_string())?;
    sched.set_delay(0.0).map_err(|e| e.to_string())?;
    let user = name;
    match name {
        "submit" => submit(ctx, user).await,
        "pending" => pending(ctx, user).await,
        "running-host-discovery" => host_discovery(ctx, user).await,
        "callback" => callback(ctx, user).await,
        "stop" => stop(ctx, user).await,
        "cancel-while-pending" => cancel_while_pending(ctx, user).await,
        "timeout" => timeout(ctx, user).await,
        "vanish" => vanish(ctx, user).await,
        "restart-recover" => restart_recover(ctx, user).await,
        "double-spawn" => double_spawn(ctx, user).await,
        "poll-idempotence" => poll_idempotence(ctx, user).await,
        "state-round-trip" => state_round_trip(ctx, user).await,
        other => Err(format!("no scenario {other}")),
    }?;
    audit_clean(&ctx.api.audit().await)
}

async fn submit(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    let body = ctx.spawn_ok(u, None).await?;
    check(body["profile_id"] == "main", || format!("default profile not applied: {body}"))?;
    let deadline = Instant::now() + UP;
    let job_id = loop {
        let rec = ctx.record(u).await?;
        if let Some(id) = rec["spawner_state"]["job_id"].as_str() {
            break id.to_string();
        }
        check(Instant::now() < deadline, || format!("no job id recorded: {rec}"))?;
        tokio::time::sleep(Duration::from_millis(50)).await;
    };
    let job = ctx.job(u)?;
    check(job.job_id == job_id, || format!("recorded job {job_id}, scheduler has {}", job.job_id))?;
    check(ctx.cluster.jobs_for(u) == 1, || "expected exactly one job".into())?;
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn pending(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.cluster.sched.set_delay(FOREVER).map_err(|e| e.to_string())?;
    ctx.spawn_ok(u, None).await?;
    let first = ctx.api.wait_phase(u, "Pending", UP).await?;
    tokio::time::sleep(Duration::from_secs(1)).await;
    let later = ctx.api.status(u).await;
    check(later == first, || format!("pending status drifted: {first} then {later}"))?;
    let job = ctx.job(u)?;
    check(job.state == JobState::Q && job.pid.is_none(), || format!("job not queued: {job:?}"))?;
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn host_discovery(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.spawn_ok(u, Some("silent")).await?;
    let status = ctx.api.wait_phase(u, "Starting", UP).await?;
    check(status["address"].is_null(), || format!("address before callback: {status}"))?;
    let job = ctx.job(u)?;
    let deadline = Instant::now() + UP;
    loop {
        let rec = ctx.record(u).await?;
        if rec["spawner_state"]["host"] == job.assigned_host.as_str() {
            break;
        }
        check(Instant::now() < deadline, || format!("host {} never recorded: {rec}", job.assigned_host))?;
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn callback(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    let status = ctx.running(u, None).await?;
    let address = status["address"].as_str().unwrap_or_default();
    check(
        address.starts_with("http://127.0.0.1:") && address.ends_with(&format!("/user/{u}")),
        || format!("address {address:?}"),
    )?;
    ctx.ping_ok(u).await?;
    let token = ctx.cluster.token_for(u).ok_or("no token in job script")?;
    let again = ctx
        .api
        .client
        .post(ctx.api.url("/hub/api/callback"))
        .json(&json!({"token": token, "address": "127.0.0.1:9"}))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    check(again.status() == StatusCode::CONFLICT, || format!("second callback: {}", again.status()))?;
    ctx.ping_ok(u).await?;
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn stop(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.running(u, None).await?;
    let token = ctx.cluster.token_for(u).ok_or("no token in job script")?;
    let live = ctx.api.introspect(&token).await;
    check(live == json!({"valid": true, "username": u}), || format!("introspect before stop: {live}"))?;
    ctx.stop_ok(u).await?;
    let (status, _) = ctx.api.ping(u).await;
    check(status == StatusCode::SERVICE_UNAVAILABLE, || format!("proxy after stop: {status}"))?;
    let dead = ctx.api.introspect(&token).await;
    check(dead["valid"] == false, || format!("token survived stop: {dead}"))?;
    ctx.wait_job(u, JobState::C).await?;
    let (status, _) = ctx.api.stop(u).await;
    check(status == StatusCode::NOT_FOUND, || format!("second stop: {status}"))?;
    let stale = ctx
        .api
        .client
        .post(ctx.api.url("/hub/api/callback"))
        .json(&json!({"token": token, "address": "127.0.0.1:9"}))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    check(stale.status() == StatusCode::UNAUTHORIZED, || format!("stale callback: {}", stale.status()))
}

async fn cancel_while_pending(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.cluster.sched.set_delay(FOREVER).map_err(|e| e.to_string())?;
    ctx.spawn_ok(u, None).await?;
    ctx.api.wait_phase(u, "Pending", UP).await?;
    ctx.stop_ok(u).await?;
    let job = ctx.wait_job(u, JobState::C).await?;
    check(job.pid.is_none(), || format!("cancelled job was launched: {job:?}"))?;
    let rec = ctx.record(u).await?;
    check(rec["spawner_state"]["stopped"] == "true", || format!("cancel not recorded: {rec}"))
}

async fn timeout(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.cluster.sched.set_delay(FOREVER).map_err(|e| e.to_string())?;
    let started = Instant::now();
    ctx.spawn_ok(u, None).await?;
    let status = ctx.api.wait_phase(u, "Failed", UP + Duration::from_secs(5)).await?;
    let elapsed = started.elapsed();
    check(elapsed >= Duration::from_millis(4500), || format!("failed too early: {elapsed:?}"))?;
    let reason = status["failure_reason"].as_str().unwrap_or_default();
    check(reason.starts_with("startup timeout"), || format!("reason {reason:?}"))?;
    ctx.wait_job(u, JobState::C).await?;
    Ok(())
}

async fn vanish(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.running(u, None).await?;
    let token = ctx.cluster.token_for(u).ok_or("no token in job script")?;
    let job = ctx.job(u)?;
    let out = ctx.cluster.sched.run_tool(ctx.cluster.dialect, Tool::Cancel, &[job.job_id.clone()], "");
    check(out.code == 0, || format!("out-of-band cancel failed: {out:?}"))?;
    let status = ctx.api.wait_phase(u, "Failed", UP).await?;
    check(status["address"].is_null(), || format!("address kept: {status}"))?;
    let (code, _) = ctx.api.ping(u).await;
    check(code == StatusCode::SERVICE_UNAVAILABLE, || format!("proxy after vanish: {code}"))?;
    let dead = ctx.api.introspect(&token).await;
    check(dead["valid"] == false, || format!("token survived vanish: {dead}"))
}

async fn restart_recover(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.running(u, None).await?;
    let before = ctx.api.status(u).await;
    ctx.hub.restart_after_kill();
    let after = ctx.api.status(u).await;
    check(after == before, || format!("status changed across restart: {before} vs {after}"))?;
    ctx.ping_ok(u).await?;
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn double_spawn(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    let (a, b) = tokio::join!(ctx.api.spawn(u, None), ctx.api.spawn(u, None));
    let mut codes = [a.0, b.0];
    codes.sort();
    check(codes == [StatusCode::ACCEPTED, StatusCode::CONFLICT], || format!("double spawn gave {a:?} and {b:?}"))?;
    let conflict = if a.0 == StatusCode::CONFLICT { &a.1 } else { &b.1 };
    check(conflict["error"] == "SessionExists" && conflict["session"]["username"] == u, || {
        format!("409 body {conflict}")
    })?;
    ctx.api.wait_phase(u, "Running", UP).await?;
    check(ctx.cluster.jobs_for(u) == 1, || format!("{} jobs submitted", ctx.cluster.jobs_for(u)))?;
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn poll_idempotence(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    let sched = &ctx.cluster.sched;
    sched.freeze().map_err(|e| e.to_string())?;
    sched.set_delay(5.0).map_err(|e| e.to_string())?;
    ctx.spawn_ok(u, Some("silent")).await?;
    ctx.api.wait_phase(u, "Pending", UP).await?;
    let first = ctx.record(u).await?;
    tokio::time::sleep(Duration::from_millis(1200)).await;
    let later = ctx.record(u).await?;
    check(first == later, || format!("record changed without clock movement: {first} vs {later}"))?;
    let job = ctx.job(u)?;
    let q1 = sched.run_tool(ctx.cluster.dialect, Tool::Status, &[job.job_id.clone()], "");
    let q2 = sched.run_tool(ctx.cluster.dialect, Tool::Status, &[job.job_id.clone()], "");
    check(q1 == q2, || format!("status output differs: {q1:?} vs {q2:?}"))?;
    sched.advance(6.0).map_err(|e| e.to_string())?;
    ctx.api.wait_phase(u, "Starting", UP).await?;
    sched.realtime().map_err(|e| e.to_string())?;
    ctx.stop_ok(u).await?;
    Ok(())
}

async fn state_round_trip(ctx: &mut Ctx, u: &str) -> Result<(), String> {
    ctx.running(u, None).await?;
    let status = ctx.api.status(u).await;
    let rec = ctx.record(u).await?;
    let db: Value = serde_json::from_slice(&std::fs::read(ctx.cluster.dir.path().join("state.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    check(db["sessions"][u] == rec, || format!("persisted {} vs served {rec}", db["sessions"][u]))?;
    let exit = ctx.hub.terminate();
    check(exit.success(), || format!("hub exited with {exit} on SIGTERM"))?;
    let job = ctx.job(u)?;
    check(job.state == JobState::R, || format!("session did not survive hub shutdown: {job:?}"))?;
    ctx.hub.launch();
    check(ctx.record(u).await? == rec, || "record changed across restart".into())?;
    check(ctx.api.status(u).await == status, || "status changed across restart".into())?;
    ctx.ping_ok(u).await?;
    ctx.stop_ok(u).await?;
    Ok(())
}

/// Tokens handed to jobs must not appear in the hub log or job output.
pub fn token_hygiene(ctx: &Ctx) -> Result<(), String> {
    let tokens = ctx.cluster.all_tokens();
    check(!tokens.is_empty(), || "no tokens issued".into())?;
    let logs = ctx.hub.log() + &ctx.cluster.job_logs();
    let leaked: Vec<_> = tokens.iter().filter(|t| logs.contains(t.as_str())).collect();
    check(leaked.is_empty(), || format!("{} of {} tokens found in logs", leaked.len(), tokens.len()))
}

/// The full suite for one dialect; returns per-scenario outcomes.
pub async fn run_all(dialect: Dialect) -> Vec<(String, Result<(), String>)> {
    let mut ctx = Ctx::new(dialect);
    let mut out = Vec::new();
    for name in SCENARIOS {
        let r = run(&mut ctx, name).await;
        out.push((name.to_string(), r));
    }
    out.push(("token-hygiene".to_string(), token_hygiene(&ctx)));
    out
}
