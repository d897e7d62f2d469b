# ugt-rec Test Suite
# Unit, integration and manual tests for the unified graph transformer recommender
