fn main() {
    let cfg = worldfilm::config::RunConfig::default();
    print!("{}", cfg.to_toml_string().unwrap());
}
