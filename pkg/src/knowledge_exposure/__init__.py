"""Knowledge Exposure anomaly detection."""
