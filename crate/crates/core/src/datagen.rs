// datagen placeholder
