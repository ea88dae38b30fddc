# Surgical visual question answering: vision-text encoder, answer decoder and harness
