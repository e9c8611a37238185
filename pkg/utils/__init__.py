# Empty file to make utils a package
