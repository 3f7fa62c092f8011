fn main() {
    // Exit quietly when stdout is a closed pipe, e.g. `rfx ... | head`.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(rfx_cli::run(std::env::args_os().collect()));
}
