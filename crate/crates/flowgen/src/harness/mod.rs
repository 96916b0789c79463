//! Run harness (subcommand implementations).
