"""Software twin of a closed-loop wide-band vibrotactile plate."""
