use std::env;
use std::fs;
use std::path::PathBuf;

// The netlib LAPACK backend links against -lcblas, which Debian does not ship
// as a standalone library. openblas bundles the cblas interface, so expose it
// under the expected name.
fn main() {
    let out = PathBuf::from(env::var("OUT_DIR").unwrap());
    let shim = out.join("libcblas.so");
    if !shim.exists() {
        for cand in [
            "/usr/lib/x86_64-linux-gnu/libopenblas.so",
            "/usr/lib/libopenblas.so",
            "/usr/lib/x86_64-linux-gnu/libblas.so",
        ] {
            if fs::metadata(cand).is_ok() {
                #[cfg(unix)]
                std::os::unix::fs::symlink(cand, &shim).ok();
                break;
            }
        }
    }
    println!("cargo:rustc-link-search=native={}", out.display());
}
