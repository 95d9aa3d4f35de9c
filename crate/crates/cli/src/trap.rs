//! Floating-point instruction trap for the integer inference path.
//!
//! The parent re-runs this binary as a traced child. The child loads the
//! model and input, runs one untraced warm-up inference, then stops itself
//! with SIGSTOP before and after the measured call. The parent single-steps
//! every instruction between the two stops, decodes it and counts x87 and
//! SSE/AVX floating-point arithmetic, comparison and conversion.

use std::path::Path;

use anyhow::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapReport {
    pub instructions: u64,
    pub float_ops: u64,
    /// Up to ten offending instructions as `address mnemonic`.
    pub examples: Vec<String>,
}

/// What the traced child runs between its markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    Infer,
    /// Deliberate float arithmetic; the trap must see it.
    Control,
}

impl Workload {
    pub fn flag(self) -> &'static str {
        match self {
            Workload::Infer => "infer",
            Workload::Control => "control",
        }
    }
}

pub fn available() -> bool {
    cfg!(all(target_os = "linux", target_arch = "x86_64"))
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod imp {
    use std::process::{Command, Stdio};

    use anyhow::{bail, Context, Result};
    use iced_x86::{CpuidFeature, Decoder, DecoderOptions, Instruction, OpKind};

    use super::TrapReport;

    const STEP_LIMIT: u64 = 4_000_000_000;
    const PREFIXES: [&str; 20] = [
        "add", "sub", "mul", "div", "sqrt", "min", "max", "cmp", "comi", "ucomi", "cvt", "round", "fmadd", "fmsub",
        "fnmadd", "fnmsub", "rcp", "rsqrt", "dp", "hadd",
    ];
    const TYPES: [&str; 4] = ["ss", "sd", "ps", "pd"];

    pub fn is_float(instr: &Instruction) -> bool {
        let x87 = instr
            .cpuid_features()
            .iter()
            .any(|f| matches!(f, CpuidFeature::FPU | CpuidFeature::FPU287 | CpuidFeature::FPU387));
        if x87 {
            return true;
        }
        let name = format!("{:?}", instr.mnemonic()).to_lowercase();
        let base = name.strip_prefix('v').unwrap_or(&name);
        let vector = (0..instr.op_count()).any(|i| {
            instr.op_kind(i) == OpKind::Register && {
                let r = instr.op_register(i);
                r.is_xmm() || r.is_ymm() || r.is_zmm()
            }
        });
        let hsub = base.starts_with("hsub") || base.starts_with("addsub");
        vector && (PREFIXES.iter().any(|p| base.starts_with(p)) || hsub) && TYPES.iter().any(|t| base.contains(t))
    }

    fn wait(pid: libc::pid_t) -> Result<i32> {
        let mut status = 0;
        if unsafe { libc::waitpid(pid, &mut status, 0) } != pid {
            bail!("waitpid failed: {}", std::io::Error::last_os_error());
        }
        Ok(status)
    }

    fn ptrace(req: libc::c_uint, pid: libc::pid_t, addr: usize, data: usize) -> Result<libc::c_long> {
        unsafe { *libc::__errno_location() = 0 };
        let r = unsafe { libc::ptrace(req, pid, addr as *mut libc::c_void, data as *mut libc::c_void) };
        if r == -1 && unsafe { *libc::__errno_location() } != 0 {
            bail!("ptrace request {req} failed: {}", std::io::Error::last_os_error());
        }
        Ok(r)
    }

    fn stop_signal(status: i32) -> Option<i32> {
        libc::WIFSTOPPED(status).then(|| libc::WSTOPSIG(status))
    }

    fn decode(pid: libc::pid_t) -> Result<Instruction> {
        let mut regs: libc::user_regs_struct = unsafe { std::mem::zeroed() };
        ptrace(libc::PTRACE_GETREGS, pid, 0, &mut regs as *mut _ as usize)?;
        let rip = regs.rip as usize;
        let mut bytes = [0u8; 16];
        for (i, chunk) in bytes.chunks_mut(8).enumerate() {
            let word = ptrace(libc::PTRACE_PEEKTEXT, pid, rip + 8 * i, 0)?;
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Ok(Decoder::with_ip(64, &bytes, rip as u64, DecoderOptions::NONE).decode())
    }

    pub fn run(mut cmd: Command) -> Result<TrapReport> {
        let child = cmd.stdin(Stdio::null()).stdout(Stdio::null()).spawn().context("spawning traced child")?;
        let pid = child.id() as libc::pid_t;
        let kill = || unsafe {
            libc::kill(pid, libc::SIGKILL);
            libc::waitpid(pid, std::ptr::null_mut(), 0);
        };
        let status = wait(pid)?;
        if stop_signal(status) != Some(libc::SIGSTOP) {
            bail!("traced child did not reach its start marker (status {status:#x})");
        }
        ptrace(libc::PTRACE_SETOPTIONS, pid, 0, libc::PTRACE_O_EXITKILL as usize)?;
        let mut report = TrapReport { instructions: 0, float_ops: 0, examples: Vec::new() };
        loop {
            if report.instructions >= STEP_LIMIT {
                kill();
                bail!("step limit reached");
            }
            let instr = match decode(pid) {
                Ok(i) => i,
                Err(e) => {
                    kill();
                    return Err(e);
                }
            };
            report.instructions += 1;
            if is_float(&instr) {
                report.float_ops += 1;
                if report.examples.len() < 10 {
                    report.examples.push(format!("{:#x} {:?}", instr.ip(), instr.mnemonic()));
                }
            }
            ptrace(libc::PTRACE_SINGLESTEP, pid, 0, 0)?;
            let status = wait(pid)?;
            match stop_signal(status) {
                Some(libc::SIGTRAP) => {}
                Some(libc::SIGSTOP) => break,
                _ => {
                    kill();
                    bail!("traced child stopped unexpectedly (status {status:#x})");
                }
            }
        }
        ptrace(libc::PTRACE_CONT, pid, 0, 0)?;
        let status = wait(pid)?;
        if !(libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0) {
            bail!("traced child failed (status {status:#x})");
        }
        Ok(report)
    }

    /// Called in the child: become traceable and stop.
    pub fn marker_start() -> Result<()> {
        ptrace(libc::PTRACE_TRACEME, 0, 0, 0)?;
        unsafe { libc::raise(libc::SIGSTOP) };
        Ok(())
    }

    pub fn marker_end() {
        unsafe { libc::raise(libc::SIGSTOP) };
    }
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
mod imp {
    use std::process::Command;

    use anyhow::{bail, Result};

    use super::TrapReport;

    pub fn run(_cmd: Command) -> Result<TrapReport> {
        bail!("the float trap needs ptrace on x86_64 Linux")
    }

    pub fn marker_start() -> Result<()> {
        bail!("the float trap needs ptrace on x86_64 Linux")
    }

    pub fn marker_end() {}
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub use imp::is_float;
pub(crate) use imp::{marker_end, marker_start};

/// Trace `exe` running the hidden trap subcommand on `model` and the raw
/// pixel codes in `input`.
pub fn trace(exe: &Path, model: &Path, input: &Path, workload: Workload) -> Result<TrapReport> {
    let mut cmd = std::process::Command::new(exe);
    cmd.arg("__float-trap").arg("--model").arg(model).arg("--input").arg(input).arg("--workload").arg(workload.flag());
    imp::run(cmd)
}

#[cfg(all(test, target_os = "linux", target_arch = "x86_64"))]
mod tests {
    use iced_x86::{Decoder, DecoderOptions};

    use super::is_float;

    fn classify(bytes: &[u8]) -> bool {
        is_float(&Decoder::new(64, bytes, DecoderOptions::NONE).decode())
    }

    #[test]
    fn float_arithmetic_is_recognized() {
        assert!(classify(&[0xf2, 0x0f, 0x58, 0xc1])); // addsd xmm0, xmm1
        assert!(classify(&[0xf3, 0x0f, 0x59, 0xc1])); // mulss xmm0, xmm1
        assert!(classify(&[0x66, 0x0f, 0x2f, 0xc1])); // comisd xmm0, xmm1
        assert!(classify(&[0xf2, 0x48, 0x0f, 0x2a, 0xc0])); // cvtsi2sd xmm0, rax
        assert!(classify(&[0xc5, 0xfc, 0x58, 0xc1])); // vaddps ymm0, ymm0, ymm1
        assert!(classify(&[0xd8, 0xc1])); // fadd st, st(1)
        assert!(classify(&[0xc4, 0xe2, 0xf1, 0xa9, 0xc2])); // vfmadd213sd xmm0, xmm1, xmm2
    }

    #[test]
    fn integer_and_move_instructions_are_not() {
        assert!(!classify(&[0x48, 0x01, 0xd8])); // add rax, rbx
        assert!(!classify(&[0x66, 0x0f, 0xfe, 0xc1])); // paddd xmm0, xmm1
        assert!(!classify(&[0x66, 0x0f, 0x38, 0x40, 0xc1])); // pmulld xmm0, xmm1
        assert!(!classify(&[0xf2, 0x0f, 0x10, 0xc1])); // movsd xmm0, xmm1
        assert!(!classify(&[0x66, 0x0f, 0xef, 0xc0])); // pxor xmm0, xmm0
        assert!(!classify(&[0xa7])); // cmpsd (string compare)
        assert!(!classify(&[0x0f, 0x57, 0xc0])); // xorps xmm0, xmm0
    }
}
