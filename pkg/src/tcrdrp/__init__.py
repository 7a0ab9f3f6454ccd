"""TCR cancer drug response model."""
