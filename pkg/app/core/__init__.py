"""Core application modules."""