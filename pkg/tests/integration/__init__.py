# Integration Tests - Testing end-to-end API functionality
