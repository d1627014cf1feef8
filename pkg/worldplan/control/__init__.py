"""Waypoint-to-actuation control."""
