# Manual Tests - Interactive testing scripts and utilities
