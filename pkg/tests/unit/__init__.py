# Unit Tests - Testing individual functions and components
