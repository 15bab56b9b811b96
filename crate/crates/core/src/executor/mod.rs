//! Sandboxed execution of generated programs against stdin/stdout tests.

mod sandbox;

use std::collections::HashSet;
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

pub use sandbox::landlock_abi;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("no test cases to evaluate")]
    NoTests,
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
}

impl TestCase {
    pub fn new(input: impl Into<String>, expected_output: impl Into<String>) -> Self {
        Self { input: input.into(), expected_output: expected_output.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub description: String,
    pub public_tests: Vec<TestCase>,
    pub private_tests: Vec<TestCase>,
    #[serde(default)]
    pub difficulty: String,
}

impl Problem {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.private_tests.is_empty() {
            return Err(ExecError::Corpus(format!("problem {} has no private tests", self.id)));
        }
        let public: HashSet<&TestCase> = self.public_tests.iter().collect();
        if self.private_tests.iter().any(|t| public.contains(t)) {
            return Err(ExecError::Corpus(format!("problem {} shares tests between public and private sets", self.id)));
        }
        Ok(())
    }
}

/// Problem with a single pooled test list, before the public/private split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsplitProblem {
    pub id: String,
    pub description: String,
    pub tests: Vec<TestCase>,
    #[serde(default)]
    pub difficulty: String,
}

/// Deterministic even split: duplicates removed, seeded shuffle, the first
/// `n / 2` tests public and the rest private.
pub fn split_tests(problem: UnsplitProblem, seed: u64) -> Result<Problem, ExecError> {
    let mut seen = HashSet::new();
    let mut tests: Vec<TestCase> = problem.tests.into_iter().filter(|t| seen.insert(t.clone())).collect();
    if tests.is_empty() {
        return Err(ExecError::Corpus(format!("problem {} has no tests", problem.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(problem.id.as_bytes()));
    tests.shuffle(&mut rng);
    let private_tests = tests.split_off(tests.len() / 2);
    Ok(Problem {
        id: problem.id,
        description: problem.description,
        public_tests: tests,
        private_tests,
        difficulty: problem.difficulty,
    })
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Reads a JSON Lines corpus, one problem per line.
pub fn load_problems(path: &Path) -> Result<Vec<Problem>, ExecError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExecError::Io { path: path.display().to_string(), source })?;
    parse_problems(&text)
}

pub fn parse_problems(text: &str) -> Result<Vec<Problem>, ExecError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem =
            serde_json::from_str(line).map_err(|e| ExecError::Corpus(format!("line {}: {e}", n + 1)))?;
        p.validate()?;
        if !ids.insert(p.id.clone()) {
            return Err(ExecError::Corpus(format!("duplicate problem id {}", p.id)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn parse_unsplit_problems(text: &str) -> Result<Vec<UnsplitProblem>, ExecError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| ExecError::Corpus(format!("line {}: {e}", n + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    WrongAnswer,
    RuntimeError,
    Timeout,
    SandboxError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub verdict: Verdict,
    pub stdout: String,
    pub stderr: String,
    pub wall_ms: u64,
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub wall_ms: u64,
    pub memory_bytes: u64,
    /// Cap per captured stream.
    pub output_bytes: usize,
    /// Largest file the program may write in its scratch directory.
    pub file_bytes: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { wall_ms: 10_000, memory_bytes: 512 << 20, output_bytes: 1 << 20, file_bytes: 16 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedProgram {
    pub source_text: String,
    pub language_tag: String,
}

impl GeneratedProgram {
    pub fn python(source: impl Into<String>) -> Self {
        Self { source_text: source.into(), language_tag: "python".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub language_tag: String,
    pub interpreter: PathBuf,
    pub interpreter_args: Vec<String>,
    /// Install the interpreter-level audit hook.
    pub audit_guard: bool,
    /// Apply a Landlock ruleset when the kernel supports it.
    pub landlock: bool,
    pub slots: usize,
    pub scratch_root: Option<PathBuf>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            language_tag: "python".into(),
            interpreter: "python3".into(),
            interpreter_args: vec!["-I".into(), "-B".into()],
            audit_guard: true,
            landlock: true,
            slots: 4,
            scratch_root: None,
        }
    }
}

/// Runs programs as confined subprocesses, at most `slots` at a time.
#[derive(Debug)]
pub struct Sandbox {
    config: SandboxConfig,
    free: Mutex<usize>,
    released: Condvar,
}

struct SlotGuard<'a>(&'a Sandbox);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.released.notify_one();
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        let slots = config.slots.max(1);
        Self { config, free: Mutex::new(slots), released: Condvar::new() }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Checks that the interpreter starts.
    pub fn probe(&self) -> Result<(), ExecError> {
        let out = Command::new(&self.config.interpreter)
            .arg("--version")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| ExecError::SandboxUnavailable(format!("{}: {e}", self.config.interpreter.display())))?;
        if !out.status.success() {
            return Err(ExecError::SandboxUnavailable(format!("{} --version failed", self.config.interpreter.display())));
        }
        Ok(())
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.released.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }

    pub fn run_program(&self, program: &GeneratedProgram, test: &TestCase, limits: &Limits) -> Result<ExecutionResult, ExecError> {
        if program.language_tag != self.config.language_tag {
            return Err(ExecError::SandboxUnavailable(format!(
                "no interpreter configured for {:?}",
                program.language_tag
            )));
        }
        if program.source_text.trim().is_empty() {
            return Ok(ExecutionResult {
                verdict: Verdict::RuntimeError,
                stdout: String::new(),
                stderr: "empty program".into(),
                wall_ms: 0,
                exit_code: None,
            });
        }
        let _slot = self.acquire();
        match self.run_confined(program, test, limits) {
            Ok(r) => Ok(r),
            Err(RunFailure::Spawn(e)) if e.kind() == std::io::ErrorKind::NotFound => Err(
                ExecError::SandboxUnavailable(format!("{}: {e}", self.config.interpreter.display())),
            ),
            Err(RunFailure::Spawn(e)) | Err(RunFailure::Io(e)) => Ok(ExecutionResult {
                verdict: Verdict::SandboxError,
                stdout: String::new(),
                stderr: e.to_string(),
                wall_ms: 0,
                exit_code: None,
            }),
        }
    }

    fn run_confined(&self, program: &GeneratedProgram, test: &TestCase, limits: &Limits) -> Result<ExecutionResult, RunFailure> {
        let scratch = match &self.config.scratch_root {
            Some(root) => tempfile::Builder::new().prefix("run-").tempdir_in(root),
            None => tempfile::Builder::new().prefix("logitcot-run-").tempdir(),
        }
        .map_err(RunFailure::Io)?;
        let scratch_path = scratch.path().canonicalize().map_err(RunFailure::Io)?;
        let main = scratch_path.join("main.py");
        std::fs::write(&main, &program.source_text).map_err(RunFailure::Io)?;

        let mut cmd = Command::new(&self.config.interpreter);
        cmd.args(&self.config.interpreter_args);
        if self.config.audit_guard {
            cmd.arg("-c").arg(sandbox::PYTHON_GUARD).arg(&scratch_path).arg(&main);
        } else {
            cmd.arg(&main);
        }
        cmd.current_dir(&scratch_path)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
            .env("HOME", &scratch_path)
            .env("TMPDIR", &scratch_path)
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());

        let ruleset = if self.config.landlock {
            sandbox::Ruleset::for_scratch(&scratch_path).map_err(RunFailure::Io)?
        } else {
            None
        };
        let ruleset_fd = ruleset.as_ref().map(|r| r.raw_fd());
        let lim = *limits;
        // SAFETY: confine_child only issues async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(move || sandbox::confine_child(&lim, ruleset_fd));
        }

        let start = Instant::now();
        let mut child = cmd.spawn().map_err(RunFailure::Spawn)?;
        drop(ruleset);
        let pgid = child.id() as libc::pid_t;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = test.input.clone();
        let writer = thread::spawn(move || {
            // the program may exit without reading; a broken pipe is fine
            let _ = stdin.write_all(input.as_bytes());
        });
        let cap = limits.output_bytes;
        let mut out_pipe = child.stdout.take().expect("piped stdout");
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || read_capped(&mut out_pipe, cap));
        let err_reader = thread::spawn(move || read_capped(&mut err_pipe, cap));

        let status = child.wait_timeout(Duration::from_millis(limits.wall_ms)).map_err(RunFailure::Io)?;
        let (status, timed_out) = match status {
            Some(s) => (s, false),
            None => {
                // SAFETY: signalling the child's own process group.
                unsafe {
                    libc::killpg(pgid, libc::SIGKILL);
                }
                (child.wait().map_err(RunFailure::Io)?, true)
            }
        };
        // reap anything left in the group so the pipes close
        // SAFETY: as above.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
        let wall_ms = start.elapsed().as_millis() as u64;
        let _ = writer.join();
        let stdout = out_reader.join().expect("stdout reader").map_err(RunFailure::Io)?;
        let stderr = err_reader.join().expect("stderr reader").map_err(RunFailure::Io)?;

        let verdict = if timed_out {
            Verdict::Timeout
        } else if !status.success() {
            Verdict::RuntimeError
        } else if outputs_match(&stdout, &test.expected_output) {
            Verdict::Pass
        } else {
            Verdict::WrongAnswer
        };
        Ok(ExecutionResult { verdict, stdout, stderr, wall_ms, exit_code: status.code() })
    }

    /// Runs every test (no short-circuit) and reports the pass fraction.
    pub fn evaluate(&self, program: &GeneratedProgram, tests: &[TestCase], limits: &Limits) -> Result<Evaluation, ExecError> {
        if tests.is_empty() {
            return Err(ExecError::NoTests);
        }
        let results = tests
            .iter()
            .map(|t| self.run_program(program, t, limits))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Evaluation::from_results(results))
    }
}

enum RunFailure {
    Spawn(std::io::Error),
    Io(std::io::Error),
}

fn read_capped(r: &mut impl Read, cap: usize) -> std::io::Result<String> {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        let room = cap.saturating_sub(kept.len());
        kept.extend_from_slice(&buf[..n.min(room)]);
    }
    Ok(String::from_utf8_lossy(&kept).into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fraction: f64,
    pub passed: usize,
    pub total: usize,
    pub results: Vec<ExecutionResult>,
}

impl Evaluation {
    pub fn from_results(results: Vec<ExecutionResult>) -> Self {
        let passed = results.iter().filter(|r| r.verdict == Verdict::Pass).count();
        let total = results.len();
        let fraction = if total == 0 { 0.0 } else { passed as f64 / total as f64 };
        Self { fraction, passed, total, results }
    }

    pub fn passed_all(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        self.results.iter().map(|r| r.verdict).collect()
    }
}

/// Judge normalization: surrounding whitespace trimmed per line, trailing
/// blank lines dropped, line endings unified.
pub fn normalize_output(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().map(str::trim).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

pub fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}

fn clip(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}... [truncated]", &text[..end])
}

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "passed",
        Verdict::WrongAnswer => "wrong answer",
        Verdict::RuntimeError => "runtime error",
        Verdict::Timeout => "time limit exceeded",
        Verdict::SandboxError => "sandbox error",
    }
}

/// Human-readable digest of a test run, deterministic in its inputs.
pub fn format_feedback(results: &[ExecutionResult], tests: &[TestCase], cap: usize) -> String {
    let total = results.len().min(tests.len());
    let passed = results.iter().take(total).filter(|r| r.verdict == Verdict::Pass).count();
    if passed == total {
        return format!("All {total} public tests passed.");
    }
    let mut out = format!("{passed} of {total} public tests passed.\n");
    for (i, (r, t)) in results.iter().zip(tests).enumerate() {
        if r.verdict == Verdict::Pass {
            continue;
        }
        out.push_str(&format!("Test {} ({}):\n", i + 1, verdict_label(r.verdict)));
        out.push_str(&format!("  input: {}\n", clip(t.input.trim_end(), cap)));
        out.push_str(&format!("  expected: {}\n", clip(t.expected_output.trim_end(), cap)));
        out.push_str(&format!("  actual: {}\n", clip(r.stdout.trim_end(), cap)));
        if matches!(r.verdict, Verdict::RuntimeError | Verdict::SandboxError) {
            let last = r.stderr.trim_end().lines().last().unwrap_or("");
            out.push_str(&format!("  error: {}\n", clip(last, cap)));
        }
    }
    out.trim_end().to_string()
}
