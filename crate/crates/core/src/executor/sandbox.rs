//! Process-level confinement for generated programs.
//!
//! Three independent layers, each enough to stop the isolation probes on its
//! own:
//!
//! * a Landlock ruleset (when the kernel supports it): read-only filesystem
//!   except the scratch directory, no TCP bind/connect;
//! * resource limits: address space, CPU seconds, file size, no core dumps;
//! * an interpreter audit hook that refuses writes outside the scratch
//!   directory and any socket, subprocess, or native-library use.

use std::ffi::CString;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::path::Path;

use super::Limits;

/// Prepended to every Python program; argv is `[scratch_dir, main_path]`.
pub(crate) const PYTHON_GUARD: &str = r#"
import os, sys
_root = os.path.realpath(sys.argv[1])
_main = sys.argv[2]

def _inside(p):
    if isinstance(p, int):
        return True
    try:
        p = os.fsdecode(p)
        full = os.path.realpath(p if os.path.isabs(p) else os.path.join(os.getcwd(), p))
    except Exception:
        return False
    return full == _root or full.startswith(_root + os.sep)

_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
_PATH_EVENTS = {
    "os.remove", "os.rename", "os.mkdir", "os.rmdir", "os.chmod", "os.chown",
    "os.symlink", "os.link", "os.truncate", "os.utime",
    "shutil.rmtree", "shutil.copyfile", "shutil.copymode", "shutil.copystat",
    "shutil.move", "shutil.chown",
}
_DENIED = (
    "socket.", "subprocess.", "os.system", "os.exec", "os.posix_spawn", "os.spawn",
    "os.fork", "os.forkpty", "os.kill", "os.killpg", "pty.", "ctypes.", "os.putenv",
    "os.unsetenv", "sys.addaudithook", "webbrowser.",
)

def _hook(event, args):
    if event == "open":
        path, mode, flags = args
        writes = (mode is not None and any(c in mode for c in "wax+")) or (
            isinstance(flags, int) and flags & _WRITE_FLAGS
        )
        if writes and not _inside(path):
            raise PermissionError("sandbox: write outside scratch directory: %r" % (path,))
    elif event in _PATH_EVENTS:
        for a in args:
            if isinstance(a, (str, bytes, os.PathLike)) and not _inside(a):
                raise PermissionError("sandbox: %s outside scratch directory: %r" % (event, a))
    elif event.startswith(_DENIED):
        raise PermissionError("sandbox: %s is not permitted" % event)

sys.addaudithook(_hook)
sys.argv = [_main]
import runpy as _runpy
_runpy.run_path(_main, run_name="__main__")
"#;

// Landlock constants from the kernel UAPI.
const LANDLOCK_CREATE_RULESET_VERSION: libc::c_uint = 1;
const LANDLOCK_RULE_PATH_BENEATH: libc::c_int = 1;
const ACCESS_FS_EXECUTE: u64 = 1 << 0;
const ACCESS_FS_READ_FILE: u64 = 1 << 2;
const ACCESS_FS_READ_DIR: u64 = 1 << 3;
const ACCESS_NET_BIND_TCP: u64 = 1 << 0;
const ACCESS_NET_CONNECT_TCP: u64 = 1 << 1;
const SCOPE_ABSTRACT_UNIX_SOCKET: u64 = 1 << 0;
const SCOPE_SIGNAL: u64 = 1 << 1;

#[repr(C)]
struct RulesetAttr {
    handled_access_fs: u64,
    handled_access_net: u64,
    scoped: u64,
}

#[repr(C, packed)]
struct PathBeneathAttr {
    allowed_access: u64,
    parent_fd: i32,
}

/// Landlock ABI version, or `None` when unsupported or disabled.
pub fn landlock_abi() -> Option<u32> {
    // SAFETY: version query with a null attribute pointer, as documented.
    let v = unsafe {
        libc::syscall(
            libc::SYS_landlock_create_ruleset,
            std::ptr::null::<RulesetAttr>(),
            0usize,
            LANDLOCK_CREATE_RULESET_VERSION,
        )
    };
    (v > 0).then_some(v as u32)
}

fn fs_rights(abi: u32) -> u64 {
    let mut all = (1u64 << 13) - 1;
    if abi >= 2 {
        all |= 1 << 13; // REFER
    }
    if abi >= 3 {
        all |= 1 << 14; // TRUNCATE
    }
    if abi >= 5 {
        all |= 1 << 15; // IOCTL_DEV
    }
    all
}

/// A ruleset built in the parent; only `restrict_self` runs after fork.
pub(crate) struct Ruleset {
    fd: OwnedFd,
}

impl Ruleset {
    pub fn for_scratch(scratch: &Path) -> io::Result<Option<Self>> {
        let Some(abi) = landlock_abi() else {
            return Ok(None);
        };
        let handled_fs = fs_rights(abi);
        let attr = RulesetAttr {
            handled_access_fs: handled_fs,
            handled_access_net: if abi >= 4 { ACCESS_NET_BIND_TCP | ACCESS_NET_CONNECT_TCP } else { 0 },
            scoped: if abi >= 6 { SCOPE_ABSTRACT_UNIX_SOCKET | SCOPE_SIGNAL } else { 0 },
        };
        let size = match abi {
            1..=3 => 8,
            4 | 5 => 16,
            _ => std::mem::size_of::<RulesetAttr>(),
        };
        // SAFETY: attr outlives the call and size does not exceed it.
        let fd = unsafe { libc::syscall(libc::SYS_landlock_create_ruleset, &attr as *const RulesetAttr, size, 0u32) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: the kernel just handed us this descriptor.
        let ruleset = Self { fd: unsafe { OwnedFd::from_raw_fd(fd as i32) } };
        ruleset.allow(Path::new("/"), ACCESS_FS_EXECUTE | ACCESS_FS_READ_FILE | ACCESS_FS_READ_DIR)?;
        ruleset.allow(scratch, handled_fs)?;
        Ok(Some(ruleset))
    }

    fn allow(&self, path: &Path, access: u64) -> io::Result<()> {
        let c = CString::new(path.as_os_str().as_bytes()).map_err(io::Error::other)?;
        // SAFETY: valid NUL-terminated path.
        let dir = unsafe { libc::open(c.as_ptr(), libc::O_PATH | libc::O_CLOEXEC) };
        if dir < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: fresh descriptor owned here.
        let dir = unsafe { OwnedFd::from_raw_fd(dir) };
        let attr = PathBeneathAttr { allowed_access: access, parent_fd: dir.as_raw_fd() };
        // SAFETY: attr is a valid path-beneath rule for this ruleset.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_landlock_add_rule,
                self.fd.as_raw_fd(),
                LANDLOCK_RULE_PATH_BENEATH,
                &attr as *const PathBeneathAttr,
                0u32,
            )
        };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    pub fn raw_fd(&self) -> i32 {
        self.fd.as_raw_fd()
    }
}

/// Runs in the forked child before exec; async-signal-safe calls only.
pub(crate) fn confine_child(limits: &Limits, ruleset_fd: Option<i32>) -> io::Result<()> {
    // own process group so a timeout can kill everything the program started
    // SAFETY: plain syscalls in the child.
    unsafe {
        if libc::setpgid(0, 0) != 0 {
            return Err(io::Error::last_os_error());
        }
        let cpu = limits.wall_ms.div_ceil(1000) + 1;
        let set = |res, v: u64| {
            let lim = libc::rlimit { rlim_cur: v as libc::rlim_t, rlim_max: v as libc::rlim_t };
            libc::setrlimit(res, &lim)
        };
        if set(libc::RLIMIT_AS, limits.memory_bytes) != 0
            || set(libc::RLIMIT_CPU, cpu) != 0
            || set(libc::RLIMIT_FSIZE, limits.file_bytes) != 0
            || set(libc::RLIMIT_CORE, 0) != 0
        {
            return Err(io::Error::last_os_error());
        }
        if let Some(fd) = ruleset_fd {
            if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                return Err(io::Error::last_os_error());
            }
            if libc::syscall(libc::SYS_landlock_restrict_self, fd, 0u32) != 0 {
                return Err(io::Error::last_os_error());
            }
        }
    }
    Ok(())
}
