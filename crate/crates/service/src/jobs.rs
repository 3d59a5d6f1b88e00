//! On-disk job store and the FIFO worker pool that drains it.
//!
//! Each job lives in `<data>/<job_id>/` with `input.png`, `mask.png`,
//! `config.json` and `status.json`, plus `result.png` and `curves.jsonl`
//! once done. `status.json` is replaced by rename, so readers only ever see
//! a complete record, and outputs are written before the record says `done`.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use attnerase_core::backend::{self, Backend, BackendDescriptor};
use attnerase_core::orchestrator::{MaskSet, RemovalConfig};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::io;

pub const INPUT_FILE: &str = "input.png";
pub const MASK_FILE: &str = "mask.png";
pub const CONFIG_FILE: &str = "config.json";
pub const STATUS_FILE: &str = "status.json";
pub const RESULT_FILE: &str = "result.png";
pub const CURVES_FILE: &str = "curves.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub status: JobStatus,
    pub config: RemovalConfig,
    pub input: String,
    pub mask: String,
    pub result: Option<String>,
    pub curves: Option<String>,
    /// Submission order within one data directory.
    pub seq: u64,
    pub submitted_at_ms: u64,
    pub started_at_ms: Option<u64>,
    pub finished_at_ms: Option<u64>,
    pub error: Option<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Job ids are generated as UUIDs; anything else cannot name a job directory.
pub fn is_valid_job_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

#[derive(Debug)]
pub struct JobStore {
    root: PathBuf,
    next_seq: AtomicU64,
}

impl JobStore {
    pub fn open(root: impl Into<PathBuf>) -> ServiceResult<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| ServiceError::io(&root, e))?;
        // Staging directories of submissions that never completed.
        for entry in std::fs::read_dir(&root).map_err(|e| ServiceError::io(&root, e))?.flatten() {
            if entry.file_name().to_string_lossy().starts_with(".staging-") {
                let _ = std::fs::remove_dir_all(entry.path());
            }
        }
        let store = Self {
            root,
            next_seq: AtomicU64::new(0),
        };
        let next = store.list()?.last().map_or(0, |r| r.seq + 1);
        store.next_seq.store(next, Ordering::SeqCst);
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Writes a new queued job. The directory appears under its final name
    /// only once every input file and the status record are in place.
    pub fn create(&self, image_png: &[u8], mask_png: &[u8], config: &RemovalConfig) -> ServiceResult<JobRecord> {
        let job_id = uuid::Uuid::new_v4().simple().to_string();
        let staging = self.root.join(format!(".staging-{job_id}"));
        std::fs::create_dir(&staging).map_err(|e| ServiceError::io(&staging, e))?;
        let record = JobRecord {
            job_id: job_id.clone(),
            status: JobStatus::Queued,
            config: config.clone(),
            input: INPUT_FILE.into(),
            mask: MASK_FILE.into(),
            result: None,
            curves: None,
            seq: self.next_seq.fetch_add(1, Ordering::SeqCst),
            submitted_at_ms: now_ms(),
            started_at_ms: None,
            finished_at_ms: None,
            error: None,
        };
        let write = || -> ServiceResult<()> {
            io::write_bytes(&staging.join(INPUT_FILE), image_png)?;
            io::write_bytes(&staging.join(MASK_FILE), mask_png)?;
            io::write_bytes(&staging.join(CONFIG_FILE), config.to_json().as_bytes())?;
            write_status(&staging, &record)?;
            let dest = self.dir(&job_id);
            std::fs::rename(&staging, &dest).map_err(|e| ServiceError::io(dest, e))
        };
        write().inspect_err(|_| {
            let _ = std::fs::remove_dir_all(&staging);
        })?;
        Ok(record)
    }

    pub fn load(&self, id: &str) -> ServiceResult<Option<JobRecord>> {
        if !is_valid_job_id(id) {
            return Ok(None);
        }
        let path = self.dir(id).join(STATUS_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ServiceError::Image(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ServiceError::io(path, e)),
        }
    }

    pub fn save(&self, record: &JobRecord) -> ServiceResult<()> {
        write_status(&self.dir(&record.job_id), record)
    }

    /// All jobs in submission order.
    pub fn list(&self) -> ServiceResult<Vec<JobRecord>> {
        let mut out = Vec::new();
        let entries = std::fs::read_dir(&self.root).map_err(|e| ServiceError::io(&self.root, e))?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(rec) = self.load(&name)? {
                out.push(rec);
            }
        }
        out.sort_by(|a, b| (a.seq, &a.job_id).cmp(&(b.seq, &b.job_id)));
        Ok(out)
    }

    pub fn read_file(&self, id: &str, file: &str) -> ServiceResult<Vec<u8>> {
        io::read_bytes(&self.dir(id).join(file))
    }

    pub fn remove(&self, id: &str) -> ServiceResult<()> {
        let dir = self.dir(id);
        std::fs::remove_dir_all(&dir).map_err(|e| ServiceError::io(dir, e))
    }
}

fn write_status(dir: &Path, record: &JobRecord) -> ServiceResult<()> {
    let tmp = dir.join(format!("{STATUS_FILE}.tmp"));
    let json = serde_json::to_vec_pretty(record).expect("job record serializes");
    io::write_bytes(&tmp, &json)?;
    let dest = dir.join(STATUS_FILE);
    std::fs::rename(&tmp, &dest).map_err(|e| ServiceError::io(dest, e))
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Worker threads; each owns its own backend instances. Zero only queues.
    pub workers: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

#[derive(Debug)]
pub enum Lookup<T> {
    NotFound,
    NotReady(JobStatus),
    Ready(T),
}

#[derive(Debug, PartialEq, Eq)]
pub enum CancelOutcome {
    Deleted,
    NotFound,
    Conflict(JobStatus),
}

#[derive(Default)]
struct Queue {
    pending: VecDeque<String>,
    shutdown: bool,
}

struct Shared {
    store: JobStore,
    queue: Mutex<Queue>,
    ready: Condvar,
    descriptors: Mutex<HashMap<String, BackendDescriptor>>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Queue> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub struct JobService {
    shared: Arc<Shared>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl JobService {
    /// Opens the store, re-queues persisted `queued` jobs in submission order,
    /// marks jobs left `running` by a previous process as failed, and starts
    /// the workers.
    pub fn start(data_dir: impl Into<PathBuf>, options: ServiceOptions) -> ServiceResult<Self> {
        let store = JobStore::open(data_dir)?;
        let mut queue = Queue::default();
        for mut rec in store.list()? {
            match rec.status {
                JobStatus::Queued => queue.pending.push_back(rec.job_id),
                JobStatus::Running => {
                    rec.status = JobStatus::Failed;
                    rec.finished_at_ms = Some(now_ms());
                    rec.error = Some("interrupted: the service stopped while the job was running".into());
                    store.save(&rec)?;
                }
                JobStatus::Done | JobStatus::Failed => {}
            }
        }
        if !queue.pending.is_empty() {
            tracing::info!(jobs = queue.pending.len(), "re-queued persisted jobs");
        }
        let shared = Arc::new(Shared {
            store,
            queue: Mutex::new(queue),
            ready: Condvar::new(),
            descriptors: Mutex::new(HashMap::new()),
        });
        let workers = (0..options.workers)
            .map(|i| {
                let shared = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("attnerase-worker-{i}"))
                    .spawn(move || worker_loop(&shared))
                    .expect("spawning worker thread")
            })
            .collect();
        Ok(Self {
            shared,
            workers: Mutex::new(workers),
        })
    }

    pub fn store(&self) -> &JobStore {
        &self.shared.store
    }

    /// Queued job ids in the order they will run.
    pub fn pending(&self) -> Vec<String> {
        self.shared.lock().pending.iter().cloned().collect()
    }

    fn descriptor(&self, backend_id: &str) -> ServiceResult<BackendDescriptor> {
        let mut cache = self.shared.descriptors.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(d) = cache.get(backend_id) {
            return Ok(d.clone());
        }
        let d = backend::open(backend_id)?.descriptor().clone();
        cache.insert(backend_id.to_string(), d.clone());
        Ok(d)
    }

    /// Validates and persists a job, then queues it.
    pub fn submit(&self, image_png: &[u8], mask_png: &[u8], config: &RemovalConfig) -> ServiceResult<JobRecord> {
        let image = io::decode_png(image_png)?;
        let mask = io::decode_mask_png(mask_png)?;
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(ServiceError::Usage(format!(
                "mask is {}x{} but image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        let descriptor = self.descriptor(&config.backend)?;
        config.validate(&descriptor)?;
        let grid = descriptor.latent_grid(image.width(), image.height())?;
        MaskSet::build(&mask, 0, grid, descriptor.layers.iter().map(|l| l.grid))?;

        let record = self.store().create(image_png, mask_png, config)?;
        let mut q = self.shared.lock();
        q.pending.push_back(record.job_id.clone());
        drop(q);
        self.shared.ready.notify_one();
        tracing::info!(job_id = %record.job_id, "job queued");
        Ok(record)
    }

    pub fn get(&self, id: &str) -> ServiceResult<Option<JobRecord>> {
        self.store().load(id)
    }

    fn done_file(&self, id: &str, file: &str) -> ServiceResult<Lookup<Vec<u8>>> {
        match self.get(id)? {
            None => Ok(Lookup::NotFound),
            Some(r) if r.status != JobStatus::Done => Ok(Lookup::NotReady(r.status)),
            Some(_) => self.store().read_file(id, file).map(Lookup::Ready),
        }
    }

    pub fn result(&self, id: &str) -> ServiceResult<Lookup<Vec<u8>>> {
        self.done_file(id, RESULT_FILE)
    }

    pub fn curves(&self, id: &str) -> ServiceResult<Lookup<Vec<u8>>> {
        self.done_file(id, CURVES_FILE)
    }

    /// Deletes a queued job. Jobs that already started are left alone.
    pub fn cancel(&self, id: &str) -> ServiceResult<CancelOutcome> {
        let mut q = self.shared.lock();
        let Some(rec) = self.store().load(id)? else {
            return Ok(CancelOutcome::NotFound);
        };
        if rec.status != JobStatus::Queued {
            return Ok(CancelOutcome::Conflict(rec.status));
        }
        q.pending.retain(|p| p != id);
        self.store().remove(id)?;
        tracing::info!(job_id = %id, "job cancelled");
        Ok(CancelOutcome::Deleted)
    }

    /// Polls until the job is done or failed.
    pub fn wait(&self, id: &str, timeout: Duration) -> ServiceResult<Option<JobRecord>> {
        let deadline = Instant::now() + timeout;
        loop {
            let rec = self.get(id)?;
            match &rec {
                Some(r) if matches!(r.status, JobStatus::Done | JobStatus::Failed) => return Ok(rec),
                None => return Ok(None),
                _ if Instant::now() >= deadline => return Ok(rec),
                _ => std::thread::sleep(Duration::from_millis(5)),
            }
        }
    }

    /// Stops taking jobs, lets running jobs finish, and joins the workers.
    /// Queued jobs stay on disk for the next start.
    pub fn shutdown(&self) {
        self.shared.lock().shutdown = true;
        self.shared.ready.notify_all();
        let handles = std::mem::take(&mut *self.workers.lock().unwrap_or_else(|p| p.into_inner()));
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for JobService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: &Shared) {
    let mut backends: HashMap<String, Box<dyn Backend>> = HashMap::new();
    loop {
        let mut record = {
            let mut q = shared.lock();
            loop {
                if q.shutdown {
                    return;
                }
                if let Some(id) = q.pending.pop_front() {
                    match shared.store.load(&id) {
                        Ok(Some(rec)) if rec.status == JobStatus::Queued => {
                            let mut rec = rec;
                            rec.status = JobStatus::Running;
                            rec.started_at_ms = Some(now_ms());
                            match shared.store.save(&rec) {
                                Ok(()) => break rec,
                                Err(e) => tracing::error!(job_id = %id, error = %e, "cannot mark job running"),
                            }
                        }
                        Ok(_) => {}
                        Err(e) => tracing::error!(job_id = %id, error = %e, "cannot load job"),
                    }
                    continue;
                }
                q = shared.ready.wait(q).unwrap_or_else(|p| p.into_inner());
            }
        };
        tracing::info!(job_id = %record.job_id, "job running");
        match run_job(&shared.store, &record, &mut backends) {
            Ok(()) => {
                record.status = JobStatus::Done;
                record.result = Some(RESULT_FILE.into());
                record.curves = Some(CURVES_FILE.into());
            }
            Err(e) => {
                tracing::warn!(job_id = %record.job_id, error = %e, "job failed");
                record.status = JobStatus::Failed;
                record.error = Some(e.to_string());
            }
        }
        record.finished_at_ms = Some(now_ms());
        if let Err(e) = shared.store.save(&record) {
            tracing::error!(job_id = %record.job_id, error = %e, "cannot record job outcome");
        }
    }
}

fn run_job(
    store: &JobStore,
    record: &JobRecord,
    backends: &mut HashMap<String, Box<dyn Backend>>,
) -> ServiceResult<()> {
    let dir = store.dir(&record.job_id);
    let image = io::read_png(&dir.join(INPUT_FILE))?;
    let mask = io::read_mask_png(&dir.join(MASK_FILE))?;
    let id = &record.config.backend;
    if !backends.contains_key(id) {
        backends.insert(id.clone(), backend::open(id)?);
    }
    let backend = backends.get_mut(id).expect("inserted above");
    let art = crate::execute(backend.as_mut(), &image, &mask, &record.config, &record.job_id)?;
    io::write_bytes(&dir.join(RESULT_FILE), &art.result_png)?;
    io::write_bytes(&dir.join(CURVES_FILE), art.curves_jsonl().as_bytes())?;
    Ok(())
}
